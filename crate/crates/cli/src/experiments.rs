//! Experiment drivers. Each returns CSV bodies and, where the experiment has
//! one, a finite-scale verdict.

use std::collections::VecDeque;

use frontlab::branching_law::OffspringDistribution;
use frontlab::coupling::{select_parameters, summarize, Coupler, CouplingConfig, CouplingSummary, Mode, REPLICATE_HEADER};
use frontlab::environment::{engineer_stretch_potential, find_stretches, Potential};
use frontlab::feynman_kac::V0Config;
use frontlab::fmt_float as f;
use frontlab::mgf::{check_vel, velocity_report, MgfConfig, VelConfig};
use frontlab::pde_solver::{front_positions, solve, solve_with, Field as Grid, FieldKind, FrontReport};
use frontlab::rng;
use frontlab::stats::{kendall_tau, median, normal_cdf};
use frontlab::Error;
use serde::{Deserialize, Serialize};

use crate::config::{CouplingMode, ExperimentConfig, Field, PotentialKind};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputFile {
    pub name: String,
    pub body: String,
}

impl OutputFile {
    pub fn new(name: impl Into<String>, body: String) -> Self {
        Self { name: name.into(), body }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
    /// False when the run was forced past a failed precondition.
    pub supported: bool,
    pub detail: String,
}

impl Verdict {
    pub fn csv(&self) -> String {
        format!(
            "verdict,passed,supported,scale,detail\n{},{},{},finite-scale surrogate,{}\n",
            self.name,
            self.passed,
            self.supported,
            self.detail.replace(',', ";")
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub files: Vec<OutputFile>,
    pub verdict: Option<Verdict>,
}

impl RunOutput {
    fn with_verdict(mut files: Vec<OutputFile>, verdict: Verdict) -> Self {
        files.push(OutputFile::new("verdict.csv", verdict.csv()));
        Self { files, verdict: Some(verdict) }
    }
}

/// Ok(true) if the precondition holds, Ok(false) if it fails under `force`.
fn precondition(check: Result<(), String>, force: bool) -> anyhow::Result<bool> {
    match check {
        Ok(()) => Ok(true),
        Err(msg) if force => {
            eprintln!("warning: {msg}; continuing because of --force, verdict marked unsupported");
            Ok(false)
        }
        Err(msg) => Err(CliError::Precondition(msg).into()),
    }
}

fn require_field(cfg: &ExperimentConfig, want: Field, exp: &str) -> anyhow::Result<()> {
    if cfg.solver.field != want {
        let name = if want == Field::Pam { "pam" } else { "fkpp" };
        return Err(CliError::Config(format!("experiment {exp} needs solver.field = \"{name}\"")).into());
    }
    Ok(())
}

fn vel_config(cfg: &ExperimentConfig) -> VelConfig {
    let m = &cfg.mc;
    VelConfig {
        units: m.units,
        mgf: MgfConfig { n_paths: m.mgf_paths, seed: cfg.seed(), ..Default::default() },
        v0: V0Config { t: m.lyapunov_t, ..Default::default() },
        eta_bar_multiples: m.eta_bar_multiples.clone(),
        ..Default::default()
    }
}

/// One-sided p-value for an increasing trend of `ys` in `xs`.
fn increasing_trend_p(xs: &[f64], ys: &[f64]) -> f64 {
    1.0 - normal_cdf(kendall_tau(xs, ys).z)
}

pub fn pam_width(cfg: &ExperimentConfig, force: bool) -> anyhow::Result<RunOutput> {
    require_field(cfg, Field::Pam, "pam-width")?;
    let medium = cfg.potential.medium()?;
    let supported = if cfg.potential.kind == PotentialKind::Constant {
        true
    } else {
        let mut vc = vel_config(cfg);
        vc.eta_bar_multiples.clear();
        let rep = velocity_report(&medium, cfg.potential.scale, &vc)?;
        precondition(
            if rep.vel_ok {
                Ok(())
            } else {
                Err(format!("VEL fails: v0 = {} vs v_c = {} (+ {})", rep.v0, rep.vc.vc, rep.joint_uncertainty))
            },
            force,
        )?
    };
    let s = &cfg.solver;
    let traj = solve(FieldKind::Pam, &medium, &s.nonlinearity(), &s.init(), s.t_end, &s.solver_config(medium.es()))?;
    let post: Vec<&FrontReport> = traj.reports.iter().filter(|r| r.t >= s.burn_in).collect();
    if post.len() < 8 || post.iter().any(|r| !r.width_pam.is_finite()) {
        return Err(Error::InsufficientResolution("PAM width undefined after burn-in; enlarge t_end or the window".into()).into());
    }
    let ts: Vec<f64> = post.iter().map(|r| r.t).collect();
    let ws: Vec<f64> = post.iter().map(|r| r.width_pam).collect();
    let q = ws.len() / 4;
    let first = ws[..q].iter().sum::<f64>() / q as f64;
    let last = ws[ws.len() - q..].iter().sum::<f64>() / q as f64;
    let p = increasing_trend_p(&ts, &ws);
    let passed = last <= 1.2 * first && p > 0.05;
    let verdict = Verdict {
        name: "bounded_pam_front".into(),
        passed,
        supported,
        detail: format!("first-quarter mean {first:.4}, last-quarter mean {last:.4}, increasing-trend p {p:.4}"),
    };
    Ok(RunOutput::with_verdict(vec![OutputFile::new("pam_width.csv", traj.csv())], verdict))
}

/// Stretch position and scale φ: configured for engineered and constant
/// media, scanned for Poisson media.
fn stretch(cfg: &ExperimentConfig) -> anyhow::Result<(f64, f64)> {
    let p = &cfg.potential;
    match p.kind {
        PotentialKind::Engineered | PotentialKind::Constant => Ok((p.x_n, p.lambda)),
        PotentialKind::Poisson => {
            let c0 = p.c0.ok_or_else(|| CliError::Config("potential.c0 is required to scan a Poisson medium".into()))?;
            let found = find_stretches(&p.medium()?, c0, (p.n_range[0], p.n_range[1]))?;
            let s = found.iter().find(|s| s.monotone_ok).ok_or_else(|| {
                Error::Domain(format!("no stretch with n in {:?} for c0 = {c0}; use potential.kind = \"engineered\"", p.n_range))
            })?;
            Ok((s.x_n, c0 * (s.n as f64).ln()))
        }
    }
}

fn stretch_precondition(cfg: &ExperimentConfig, force: bool) -> anyhow::Result<bool> {
    let (ei, es) = cfg.potential.bounds();
    precondition(if es > 2.0 * ei { Ok(()) } else { Err(format!("need es/ei > 2, got {}", es / ei)) }, force)
}

pub fn fkpp_width(cfg: &ExperimentConfig, force: bool) -> anyhow::Result<RunOutput> {
    require_field(cfg, Field::Fkpp, "fkpp-width")?;
    let supported = stretch_precondition(cfg, force)?;
    let (x_n, phi) = stretch(cfg)?;
    let medium = cfg.potential.medium()?;
    let (ei, es) = cfg.potential.bounds();
    let delta1 = select_parameters(ei, es, cfg.coupling.delta1).map(|p| p.delta1).unwrap_or(cfg.coupling.delta1.unwrap_or(0.02));
    let (l, r) = (x_n - 4.0 * delta1 * phi, x_n + 2.0 * delta1 * phi);
    let s = &cfg.solver;
    let mut reports = Vec::new();
    let mut t_n: Option<(f64, f64, f64)> = None;
    solve_with(FieldKind::Fkpp, &medium, &s.nonlinearity(), &s.init(), s.t_end, &s.solver_config(medium.es()), |g| {
        reports.push(front_positions(g, s.eps, s.big_m));
        if t_n.is_none() && g.value_at(x_n).is_some_and(|w| w >= s.delta) {
            if let (Some(wl), Some(wr)) = (g.value_at(l), g.value_at(r)) {
                t_n = Some((g.time, wl, wr));
            }
        }
        Ok(())
    })?;
    let (lo, hi) = (x_n - 2.0 * phi, x_n + 2.0 * phi);
    let in_stretch = |r: &FrontReport| (lo..=hi).contains(&r.m_eps);
    let post: Vec<&FrontReport> = reports.iter().filter(|r| r.t >= s.burn_in && r.width_fkpp.is_finite()).collect();
    let on: Vec<f64> = post.iter().filter(|r| in_stretch(r)).map(|r| r.width_fkpp).collect();
    let off: Vec<f64> = post.iter().filter(|r| !in_stretch(r)).map(|r| r.width_fkpp).collect();
    let max_on = on.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let med_off = if off.is_empty() { f64::NAN } else { median(&off) };
    let widening = max_on >= 2.0 * med_off;
    let argmax = post.iter().max_by(|a, b| a.width_fkpp.total_cmp(&b.width_fkpp));
    let localized = argmax.is_some_and(|r| in_stretch(r));
    let inequality = t_n.is_some_and(|(_, wl, wr)| wl <= wr + s.witness_eps);

    let mut widths = String::from("t,m_eps,m_eps_minus,width_fkpp,stretch_epoch\n");
    for r in &reports {
        widths.push_str(&format!("{},{},{},{},{}\n", f(r.t), f(r.m_eps), f(r.m_eps_minus), f(r.width_fkpp), in_stretch(r)));
    }
    let (tn, wl, wr) = t_n.unwrap_or((f64::NAN, f64::NAN, f64::NAN));
    let geometry =
        format!("x_n,phi,delta1,l,r,t_n,w_l,w_r\n{},{},{},{},{},{},{},{}\n", f(x_n), f(phi), f(delta1), f(l), f(r), f(tn), f(wl), f(wr));
    let verdict = Verdict {
        name: "fkpp_widening".into(),
        passed: widening && inequality && localized,
        supported,
        detail: format!(
            "stretch max width {max_on:.3}, off-stretch median {med_off:.3}, widening {widening}, \
             w(t_n,l) = {wl:.4} vs w(t_n,r) = {wr:.4} (inequality {inequality}), max localized {localized}"
        ),
    };
    Ok(RunOutput::with_verdict(vec![OutputFile::new("fkpp_width.csv", widths), OutputFile::new("stretch.csv", geometry)], verdict))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Witness {
    pub t: f64,
    pub l: f64,
    pub r: f64,
    pub w_l: f64,
    pub w_r: f64,
}

/// The pair l < r with r − l in [min_sep, max_sep] maximizing w(r) − w(l).
pub fn best_pair(g: &Grid, min_sep: f64, max_sep: f64) -> Option<Witness> {
    let a = ((min_sep / g.dx).ceil() as usize).max(1);
    let b = (max_sep / g.dx).floor() as usize;
    if a > b {
        return None;
    }
    let w = |i: usize| g.values[i] * g.log_exponent.exp();
    let mut best: Option<(f64, usize, usize)> = None;
    // Sliding minimum of w over the admissible l-range [j − b, j − a].
    let mut window: VecDeque<usize> = VecDeque::new();
    for j in a..g.len() {
        let add = j - a;
        while window.back().is_some_and(|&k| w(k) >= w(add)) {
            window.pop_back();
        }
        window.push_back(add);
        while window.front().is_some_and(|&k| k + b < j) {
            window.pop_front();
        }
        let k = *window.front().expect("window holds j - a");
        let gap = w(j) - w(k);
        if best.is_none_or(|(bg, _, _)| gap > bg) {
            best = Some((gap, k, j));
        }
    }
    best.map(|(_, k, j)| Witness { t: g.time, l: g.x(k), r: g.x(j), w_l: w(k), w_r: w(j) })
}

pub fn nonmonotone(cfg: &ExperimentConfig, force: bool) -> anyhow::Result<RunOutput> {
    require_field(cfg, Field::Fkpp, "nonmonotone")?;
    let supported = stretch_precondition(cfg, force)?;
    let (_, phi) = stretch(cfg)?;
    let medium = cfg.potential.medium()?;
    let s = &cfg.solver;
    let max_sep = s.max_sep.unwrap_or(2.0 * phi);
    let mut witnesses = Vec::new();
    solve_with(FieldKind::Fkpp, &medium, &s.nonlinearity(), &s.init(), s.t_end, &s.solver_config(medium.es()), |g| {
        if let Some(w) = best_pair(g, s.min_sep, max_sep) {
            if w.w_l <= w.w_r - s.witness_eps {
                witnesses.push(w);
            }
        }
        Ok(())
    })?;
    let mut csv = String::from("t,l,r,w_l,w_r,r_minus_l\n");
    for w in &witnesses {
        csv.push_str(&format!("{},{},{},{},{},{}\n", f(w.t), f(w.l), f(w.r), f(w.w_l), f(w.w_r), f(w.r - w.l)));
    }
    let largest = witnesses.iter().map(|w| w.w_r - w.w_l).fold(f64::NEG_INFINITY, f64::max);
    let verdict = Verdict {
        name: "non_monotone".into(),
        passed: !witnesses.is_empty(),
        supported,
        detail: format!("{} witnesses with gap >= {}; largest gap {largest:.4}", witnesses.len(), s.witness_eps),
    };
    Ok(RunOutput::with_verdict(vec![OutputFile::new("witnesses.csv", csv)], verdict))
}

pub fn vel_scan(cfg: &ExperimentConfig) -> anyhow::Result<RunOutput> {
    let medium = cfg.potential.medium()?;
    let reports = check_vel(&medium, &cfg.mc.scalings, &vel_config(cfg))?;
    let mut table = String::from("C,v_c,v_c_se,v_c_residual,v_0,joint_uncertainty,vel_ok\n");
    let mut eta = String::from("C,v,eta_bar\n");
    for r in &reports {
        table.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            f(r.scale),
            f(r.vc.vc),
            f(r.vc.se),
            f(r.vc.residual),
            f(r.v0),
            f(r.joint_uncertainty),
            r.vel_ok
        ));
        for &(v, e) in &r.eta_bar {
            eta.push_str(&format!("{},{},{}\n", f(r.scale), f(v), f(e)));
        }
    }
    let mut order: Vec<&_> = reports.iter().collect();
    order.sort_by(|a, b| a.scale.total_cmp(&b.scale));
    let increasing = order.windows(2).all(|w| w[1].v0 > w[0].v0);
    let top = order.last().is_some_and(|r| r.vel_ok);
    let verdict = Verdict {
        name: "vel_scan".into(),
        passed: increasing && top,
        supported: true,
        detail: format!("v0 strictly increasing in C: {increasing}; vel_ok at the largest C: {top}"),
    };
    Ok(RunOutput::with_verdict(vec![OutputFile::new("vel_scan.csv", table), OutputFile::new("eta_bar.csv", eta)], verdict))
}

pub struct CouplingPoint {
    pub lambda: f64,
    pub delta1: f64,
    pub t_prime: f64,
    pub t_check: f64,
    pub summary: CouplingSummary,
    pub replicates: String,
}

/// Replicates of the coupling on an engineered stretch of half-length Λ.
pub fn coupling_point(cfg: &ExperimentConfig, lambda: f64, seed: u64) -> anyhow::Result<CouplingPoint> {
    let p = &cfg.potential;
    let c = &cfg.coupling;
    let pot = engineer_stretch_potential(p.ei, p.es, lambda, p.x_n, (p.window[0], p.window[1]))?;
    let params = select_parameters(p.ei, p.es, c.delta1)?;
    let mut cc = CouplingConfig::new(p.ei, p.es, p.x_n, lambda, &params)?;
    cc.dt = c.dt;
    cc.free_keep = c.free_keep;
    cc.mode = match c.mode {
        CouplingMode::Full => Mode::Full,
        CouplingMode::Reduced => Mode::Reduced,
    };
    cc.check_potential(&pot)?;
    let t_check = cc.t_check;
    let coupler = Coupler::new(cc, &pot, &OffspringDistribution::binary())?;
    let runs = coupler.run_many(seed, c.reps)?;
    let mut replicates = String::from(REPLICATE_HEADER);
    replicates.push('\n');
    for r in &runs {
        replicates.push_str(&r.csv_row());
        replicates.push('\n');
    }
    Ok(CouplingPoint { lambda, delta1: params.delta1, t_prime: params.t_prime, t_check, summary: summarize(&runs, t_check), replicates })
}

pub const AGGREGATE_HEADER: &str = "Lambda,delta1,t_prime,success_freq,ci_low,ci_high,good_freq,good_ci_low,good_ci_high,\
g1_freq,g2_freq,tau_violation_rate,subset_violation_rate,capped";

impl CouplingPoint {
    pub fn aggregate_row(&self) -> String {
        let s = &self.summary;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            f(self.lambda),
            f(self.delta1),
            f(self.t_prime),
            f(s.success_freq),
            f(s.success_ci.0),
            f(s.success_ci.1),
            f(s.good_freq),
            f(s.good_ci.0),
            f(s.good_ci.1),
            f(s.g1_freq),
            f(s.g2_freq),
            f(s.tau_violation_rate),
            f(s.subset.rate),
            s.capped
        )
    }
}

fn lambda_tag(lambda: f64) -> String {
    format!("{lambda}").replace('.', "p")
}

pub fn coupling(cfg: &ExperimentConfig, force: bool) -> anyhow::Result<RunOutput> {
    let supported = stretch_precondition(cfg, force)?;
    let mut files = Vec::new();
    let mut aggregate = format!("{AGGREGATE_HEADER}\n");
    let mut points = Vec::new();
    for (i, &lambda) in cfg.coupling.lambdas.iter().enumerate() {
        let pt = coupling_point(cfg, lambda, rng::substream(cfg.seed(), i as u64))?;
        aggregate.push_str(&pt.aggregate_row());
        aggregate.push('\n');
        files.push(OutputFile::new(format!("coupling_L{}.csv", lambda_tag(lambda)), pt.replicates.clone()));
        points.push(pt);
    }
    files.insert(0, OutputFile::new("coupling_summary.csv", aggregate));
    let lambdas: Vec<f64> = points.iter().map(|p| p.lambda).collect();
    let good: Vec<f64> = points.iter().map(|p| p.summary.good_freq).collect();
    let tau = if points.len() > 1 { kendall_tau(&lambdas, &good).tau } else { f64::NAN };
    let target = cfg.coupling.target;
    let all_reach = good.iter().all(|&g| g >= target);
    let mut sorted: Vec<(f64, f64)> = lambdas.iter().cloned().zip(good.iter().cloned()).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let rising = sorted.windows(2).all(|w| w[1].1 >= w[0].1);
    let verdict = Verdict {
        name: "coupling_success".into(),
        passed: all_reach && rising,
        supported,
        detail: format!("freq(G1 and G2) by Lambda {:?}; target {target}; non-decreasing {rising}; Kendall tau {tau:.3}", sorted),
    };
    Ok(RunOutput::with_verdict(files, verdict))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(values: Vec<f64>) -> Grid {
        Grid { kind: FieldKind::Fkpp, dx: 1.0, k0: 0, values, log_exponent: 0.0, time: 1.0 }
    }

    #[test]
    fn best_pair_respects_separation() {
        let g = grid(vec![1.0, 0.2, 0.9, 0.1, 0.8, 0.0]);
        let w = best_pair(&g, 2.0, 3.0).unwrap();
        assert_eq!((w.l, w.r), (1.0, 4.0));
        assert!((w.w_r - w.w_l - 0.6).abs() < 1e-12);
        let w = best_pair(&g, 1.0, 1.0).unwrap();
        assert_eq!(w.r - w.l, 1.0);
        assert!((w.w_r - w.w_l - 0.7).abs() < 1e-12);
    }

    #[test]
    fn monotone_profile_has_no_positive_gap() {
        let g = grid((0..50).map(|i| 1.0 - i as f64 / 49.0).collect());
        let w = best_pair(&g, 2.0, 10.0).unwrap();
        assert!(w.w_r - w.w_l < 0.0);
    }

    #[test]
    fn trend_p_is_one_sided() {
        let xs: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let down: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!(increasing_trend_p(&xs, &down) > 0.99);
        assert!(increasing_trend_p(&xs, &xs) < 1e-6);
    }
}
