//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use frontlab::bbmre::{estimate_w, BbmConfig, Target};
use frontlab::branching_law::{Nonlinearity, OffspringDistribution};
use frontlab::coupling::{select_parameters, summarize, Coupler, CouplingConfig, Tag};
use frontlab::environment::{engineer_stretch_potential, BumpProfile, ConstantPotential, PoissonBumpPotential, Potential};
use frontlab::error::Error;
use frontlab::feynman_kac::{estimate_u_mc, estimate_v0, V0Config};
use frontlab::mgf::{estimate_l, estimate_l_direct, estimate_l_prime, estimate_vc, solve_eta_bar, MgfConfig};
use frontlab::pde_solver::{solve, solve_with, sup_level, FieldKind, InitialCondition, SolverConfig, WindowPolicy};
use frontlab::rng;
use frontlab::stats::normal_cdf;
use frontlab_cli::config::PotentialKind;
use frontlab_cli::experiments::{self, RunOutput};
use frontlab_cli::manifest::{execute, rerun, MANIFEST_FILE};
use frontlab_cli::{Experiment, ExperimentConfig, Task};
use rand::Rng;

type Outcome = Result<(bool, String)>;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn config(name: &str) -> Result<ExperimentConfig> {
    ExperimentConfig::load(&configs_dir().join(name))
}

fn file<'a>(out: &'a RunOutput, name: &str) -> Result<&'a str> {
    out.files.iter().find(|f| f.name == name).map(|f| f.body.as_str()).ok_or_else(|| anyhow!("no {name}"))
}

fn pam_closed_form() -> Outcome {
    let cfg = SolverConfig { dx: 0.01, dt: 4e-5, window: WindowPolicy::Fixed { lo: -20.0, hi: 20.0 }, ..Default::default() };
    let pot = ConstantPotential::new(1.0);
    let f = solve_with(FieldKind::Pam, &pot, &Nonlinearity::binary(), &InitialCondition::Heaviside, 1.0, &cfg, |_| Ok(()))?;
    let mut worst: f64 = 0.0;
    for k in -30..=30 {
        let x = k as f64 * 0.1;
        let exact = std::f64::consts::E * normal_cdf(-x);
        let got = f.value_at(x).context("point outside window")?;
        worst = worst.max((got / exact - 1.0).abs());
    }
    Ok((worst <= 0.02, format!("max relative error {worst:.2e} on [-3, 3] (tol 2e-2)")))
}

fn homogeneous_fkpp() -> Result<(Outcome, Outcome)> {
    let cfg = SolverConfig { cadence: Some(0.5), ..Default::default() };
    let pot = ConstantPotential::new(1.0);
    let traj = solve(FieldKind::Fkpp, &pot, &Nonlinearity::binary(), &InitialCondition::Heaviside, 50.0, &cfg)?;
    let speed = sup_level(&traj.last, 0.5) / 50.0;
    let rel = (speed / 2f64.sqrt() - 1.0).abs();
    let c2 = Ok((rel <= 0.08, format!("m(50)/50 = {speed:.4}, relative error {rel:.3} (tol 0.08)")));
    let widths: Vec<f64> = traj.reports.iter().filter(|r| (20.0..=50.0).contains(&r.t)).map(|r| r.width_fkpp).collect();
    let max = widths.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = widths.iter().cloned().fold(f64::INFINITY, f64::min);
    let c3 = Ok((max - min <= 0.5, format!("width range {:.3} over t in [20, 50], {} samples (tol 0.5)", max - min, widths.len())));
    Ok((c2, c3))
}

fn fd_u(pot: &dyn Potential, t: f64, x: f64) -> Result<f64> {
    let dx = 0.02;
    let cfg = SolverConfig {
        dx,
        dt: SolverConfig::stable_dt(dx, pot.es()),
        window: WindowPolicy::Fixed { lo: -25.0, hi: 25.0 },
        ..Default::default()
    };
    let f = solve_with(FieldKind::Pam, pot, &Nonlinearity::binary(), &InitialCondition::Heaviside, t, &cfg, |_| Ok(()))?;
    Ok(f.log_value_at(x).context("point outside window")?.exp())
}

fn mc_vs_fd() -> Outcome {
    let poisson = PoissonBumpPotential::sample(1.0, 3.0, 1.0, BumpProfile::default(), (-40.0, 40.0), 5)?;
    let classes: [(&str, &dyn Potential); 2] = [("constant", &ConstantPotential::new(1.0)), ("poisson", &poisson)];
    let mut r = rng::stream(2024, 0);
    let (mut ok, mut worst) = (true, 0.0f64);
    for (name, pot) in classes {
        let mut n = 0;
        while n < 5 {
            let t: f64 = r.random_range(0.5..4.0);
            let x: f64 = r.random_range(-4.0..4.0);
            // Beyond 3√t almost no path ends in the support of u0.
            if x > 3.0 * t.sqrt() {
                continue;
            }
            let mc = estimate_u_mc(pot, t, x, &InitialCondition::Heaviside, 100_000, 0.005, 500 + n)?;
            let fd = fd_u(pot, t, x)?;
            let z = (mc.value - fd).abs() / mc.standard_error;
            worst = worst.max(z);
            if z > 3.0 {
                ok = false;
                eprintln!("  {name}: t = {t:.3}, x = {x:.3}: MC {} +- {}, FD {fd}", mc.value, mc.standard_error);
            }
            n += 1;
        }
    }
    Ok((ok, format!("10 points, 1e5 paths each, largest |MC - FD| = {worst:.2} SE (tol 3)")))
}

fn fd_w(t: f64, x: f64) -> Result<f64> {
    let dx = 0.02;
    let cfg = SolverConfig {
        dx,
        dt: SolverConfig::stable_dt(dx, 1.0),
        window: WindowPolicy::Fixed { lo: -30.0, hi: 30.0 },
        ..Default::default()
    };
    let pot = ConstantPotential::new(1.0);
    let f = solve_with(FieldKind::Fkpp, &pot, &Nonlinearity::binary(), &InitialCondition::Heaviside, t, &cfg, |_| Ok(()))?;
    f.value_at(x).context("point outside window")
}

fn mckean() -> Outcome {
    let pot = ConstantPotential::new(1.0);
    let d = OffspringDistribution::binary();
    let bc = BbmConfig { dt: 0.05, cap: 1_000_000, genealogy: false };
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, &(x, t)) in [(1.0, 1.0), (2.0, 2.0), (3.0, 3.0)].iter().enumerate() {
        let e = estimate_w(&pot, x, t, Target::AtOrBelow(0.0), &d, 10_000, &bc, 40 + i as u64)?;
        let fd = fd_w(t, x)?;
        let z = (e.w_hat - fd).abs() / e.se;
        ok &= z <= 3.0 && e.indeterminate_frac == 0.0;
        parts.push(format!("({x},{t}): {:.4} vs {fd:.4} ({z:.2} SE)", e.w_hat));
    }
    let down = estimate_w(&pot, 2.0, 2.0, Target::AtOrBelow(0.0), &d, 10_000, &bc, 50)?;
    let up = estimate_w(&pot, 0.0, 2.0, Target::AtOrAbove(2.0), &d, 10_000, &bc, 51)?;
    let z = (down.w_hat - up.w_hat).abs() / (down.se.powi(2) + up.se.powi(2)).sqrt();
    ok &= z <= 3.0;
    parts.push(format!("symmetry {z:.2} joint SE"));
    Ok((ok, format!("{} (tol 3)", parts.join("; "))))
}

fn mgf_closed_forms() -> Outcome {
    let flat = ConstantPotential::new(1.0);
    let cfg = MgfConfig { n_paths: 20_000, seed: 61, ..Default::default() };
    let l = estimate_l(&flat, -2.0, 5, &cfg)?.l_hat;
    let lp = estimate_l_prime(&flat, -2.0, 5, &cfg)?.method_a;
    let eb = solve_eta_bar(&flat, 2.0, 5, &cfg)?;
    let lt = estimate_l_direct(&flat, -1.0, 1.0, &MgfConfig { n_paths: 40_000, seed: 62, ..Default::default() })?;
    let (m, se) = (lt.l_hat.exp(), lt.l_hat.exp() * lt.se);
    let exact = (-2f64.sqrt()).exp();
    let checks = [(l / -2.0 - 1.0).abs() <= 0.02, (lp / 0.5 - 1.0).abs() <= 0.03, (eb + 2.0).abs() <= 0.05, (m - exact).abs() <= 3.0 * se];
    Ok((
        checks.iter().all(|&c| c),
        format!("L(-2) = {l:.4}, L'(-2) = {lp:.4}, eta_bar(2) = {eb:.4}, E[exp(-H_1)] = {m:.4} +- {se:.4} vs {exact:.4}"),
    ))
}

fn velocities() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for c in [1.0, 2.0] {
        let pot = ConstantPotential::new(c);
        let vc = estimate_vc(&pot, 3, &MgfConfig { n_paths: 4000, seed: 70, ..Default::default() })?.vc;
        let v0 = estimate_v0(&pot, &V0Config::default())?.v0;
        let exact = (2.0 * c).sqrt();
        ok &= vc.abs() <= 0.05 && (v0 - exact).abs() <= 0.05;
        parts.push(format!("c = {c}: v_c = {vc:.3}, v_0 = {v0:.3} vs {exact:.3}"));
    }
    let out = experiments::vel_scan(&config("vel_scan.toml")?)?;
    let rows: Vec<Vec<String>> = file(&out, "vel_scan.csv")?.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect();
    let v0: Vec<f64> = rows.iter().map(|r| r[4].parse()).collect::<std::result::Result<_, _>>()?;
    let increasing = v0.windows(2).all(|w| w[1] > w[0]);
    let last = rows.last().context("empty scan")?;
    let vel_ok = last[0].parse::<f64>()? == 8.0 && last[6] == "true";
    ok &= increasing && vel_ok;
    parts.push(format!("poisson v_0 by C = {v0:.3?}, increasing {increasing}, vel_ok at C=8 {vel_ok}"));
    Ok((ok, parts.join("; ")))
}

fn feasibility() -> Outcome {
    let rejected = matches!(select_parameters(1.0, 2.0, None), Err(Error::Infeasible(_)));
    let mut ok = rejected;
    let mut parts = vec![format!("es/ei = 2 rejected {rejected}")];
    for es in [3.0, 5.0] {
        let p = select_parameters(1.0, es, None)?;
        let (lo, hi) = oracle_window(p.a, p.delta1).context("oracle window empty")?;
        let err = (lo - p.window.0).abs().max((hi - p.window.1).abs());
        ok &= p.window.0 < p.window.1 && err < 1e-3;
        parts.push(format!("es = {es}: window ({:.4}, {:.4}), oracle error {err:.1e}", p.window.0, p.window.1));
    }
    Ok((ok, parts.join("; ")))
}

/// Feasible t′ range by brute force on a 1e-4 grid.
fn oracle_window(a: f64, delta1: f64) -> Option<(f64, f64)> {
    let b1 = (1.0 + 4.0 * delta1).powi(2);
    let b2 = (1.0 + 2.0 * delta1).powi(2);
    let sup = |t: f64, b: f64| {
        (0..4000)
            .map(|i| {
                let s = t * i as f64 / 4000.0;
                t + a * s - b / (t - s)
            })
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let ok: Vec<f64> =
        (1..10_000).map(|i| i as f64 * 1e-4).filter(|&t| t < 1.0 - 5.0 * delta1 && sup(t, b1) < 0.0 && sup(t, b2) > 0.0).collect();
    Some((*ok.first()?, *ok.last()?))
}

fn coupling() -> Outcome {
    let (ei, es, lambda, x_n) = (1.0, 5.0, 15.0, 40.0);
    let pot = engineer_stretch_potential(ei, es, lambda, x_n, (-100.0, 200.0))?;
    let p = select_parameters(ei, es, None)?;
    let d = OffspringDistribution::binary();
    let run_at = |dt: f64| -> Result<_> {
        let mut cfg = CouplingConfig::new(ei, es, x_n, lambda, &p)?;
        cfg.dt = dt;
        cfg.check_potential(&pot)?;
        let t_check = cfg.t_check;
        let runs = Coupler::new(cfg, &pot, &d)?.run_many(9, 200)?;
        Ok((summarize(&runs, t_check), runs))
    };
    let (coarse, runs) = run_at(1e-3)?;
    let invariants = runs.iter().all(|r| {
        let final_lm = r.trace.final_particles.iter().filter(|q| q.tag == Tag::Lm).count();
        r.outcome.populations.iter().all(|s| s.lm == s.rm && s.lc == s.rc) && final_lm == r.trace.lm_at_end
    });
    let (fine, _) = run_at(5e-4)?;
    let good = coarse.good_freq >= 0.7;
    let subset = coarse.subset.rate < 0.01 && fine.subset.rate <= coarse.subset.rate;
    Ok((
        invariants && good && subset,
        format!(
            "invariants {invariants}; freq(G1 and G2) = {:.3}, 95% CI ({:.3}, {:.3}) vs 0.7 (G1 {:.3}, G2 {:.3}); \
             subset violation rate {:.3} at dt 1e-3, {:.3} at dt 5e-4",
            coarse.good_freq, coarse.good_ci.0, coarse.good_ci.1, coarse.g1_freq, coarse.g2_freq, coarse.subset.rate, fine.subset.rate
        ),
    ))
}

fn width_contrast() -> Outcome {
    let fkpp = experiments::fkpp_width(&config("fkpp_width.toml")?, false)?;
    let pam = experiments::pam_width(&config("pam_width.toml")?, true)?;
    let (a, b) = (fkpp.verdict.context("no verdict")?, pam.verdict.context("no verdict")?);
    Ok((a.passed && b.passed, format!("F-KPP: {}; PAM (forced, supported {}): {}", a.detail, b.supported, b.detail)))
}

fn nonmonotone() -> Outcome {
    let stretch = experiments::nonmonotone(&config("nonmonotone.toml")?, false)?;
    let mut flat = config("nonmonotone.toml")?;
    flat.potential.kind = PotentialKind::Constant;
    flat.potential.c = 1.0;
    let control = experiments::nonmonotone(&flat, true)?;
    let count = |o: &RunOutput| -> Result<usize> { Ok(file(o, "witnesses.csv")?.lines().skip(1).count()) };
    let (n, m) = (count(&stretch)?, count(&control)?);
    Ok((n >= 1 && m == 0, format!("{n} witnesses on the engineered stretch, {m} on the constant medium")))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir()?;
    let mut runs: Vec<(Experiment, ExperimentConfig, bool)> = Vec::new();
    for (e, name, force) in [
        (Experiment::PamWidth, "pam_width.toml", true),
        (Experiment::FkppWidth, "fkpp_width.toml", false),
        (Experiment::Nonmonotone, "nonmonotone.toml", false),
    ] {
        let mut c = config(name)?;
        c.solver.t_end = 20.0;
        runs.push((e, c, force));
    }
    let mut vel = config("vel_scan.toml")?;
    vel.mc.scalings = vec![1.0, 2.0];
    vel.mc.mgf_paths = 300;
    vel.mc.units = 4;
    runs.push((Experiment::VelScan, vel, false));
    let mut coup = config("coupling.toml")?;
    coup.coupling.lambdas = vec![10.0, 15.0];
    coup.coupling.reps = 10;
    runs.push((Experiment::Coupling, coup, false));

    let mut ok = true;
    let mut parts = Vec::new();
    for (i, (e, c, force)) in runs.into_iter().enumerate() {
        let first = dir.path().join(format!("{i}a"));
        let m = execute(Task::Exp(e), &c, force, &first)?;
        let report = rerun(&first.join(MANIFEST_FILE), &dir.path().join(format!("{i}b")))?;
        let same = report.identical() && report.files.len() == m.outputs.len();
        ok &= same;
        parts.push(format!("{}: {} files {}", Task::Exp(e), m.outputs.len(), if same { "identical" } else { "DIFFER" }));
    }
    Ok((ok, parts.join("; ")))
}

fn report(id: usize, name: &str, started: Instant, outcome: Outcome) -> bool {
    let secs = started.elapsed().as_secs_f64();
    let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e:#}")));
    println!("[{}] {id:>2} {name}: {detail} ({secs:.0} s)", if passed { "PASS" } else { "FAIL" });
    passed
}

fn main() {
    let mut results = Vec::new();
    let mut go = |id: usize, name: &str, f: fn() -> Outcome| {
        let t = Instant::now();
        results.push(report(id, name, t, f()));
    };
    go(1, "PAM closed form", pam_closed_form);
    let t = Instant::now();
    match homogeneous_fkpp() {
        Ok((c2, c3)) => {
            let elapsed = Instant::now();
            results.push(report(2, "homogeneous F-KPP speed", t, c2));
            results.push(report(3, "homogeneous front boundedness", elapsed, c3));
        }
        Err(e) => {
            results.push(report(2, "homogeneous F-KPP speed", t, Err(anyhow!("{e:#}"))));
            results.push(report(3, "homogeneous front boundedness", t, Err(e)));
        }
    }
    let mut go = |id: usize, name: &str, f: fn() -> Outcome| {
        let t = Instant::now();
        results.push(report(id, name, t, f()));
    };
    go(4, "Feynman-Kac MC vs FD", mc_vs_fd);
    go(5, "BBMRE McKean check", mckean);
    go(6, "hitting MGF closed forms", mgf_closed_forms);
    go(7, "v_c and v_0", velocities);
    go(8, "parameter feasibility", feasibility);
    go(9, "coupling at Lambda = 15", coupling);
    go(10, "front-width contrast", width_contrast);
    go(11, "non-monotonicity", nonmonotone);
    go(12, "manifest determinism", determinism);
    let failed = results.iter().filter(|&&p| !p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
