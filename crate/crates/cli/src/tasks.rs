//! Single-purpose subcommands and dispatch to the experiment drivers.

use std::fmt;

use frontlab::bbmre::{estimate_w, BbmConfig, Target};
use frontlab::branching_law::OffspringDistribution;
use frontlab::environment::{discretize, Potential};
use frontlab::feynman_kac::{estimate_lyapunov, estimate_u_mc, estimate_v0, LyapunovConfig, V0Config};
use frontlab::fmt_float as f;
use frontlab::mgf::{estimate_l, estimate_l_prime, MgfConfig};
use frontlab::pde_solver::{solve, SNAPSHOT_HEADER};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, TargetSide};
use crate::experiments::{self, OutputFile, RunOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    PamWidth,
    FkppWidth,
    Nonmonotone,
    VelScan,
    Coupling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Potential,
    Solve,
    Fronts,
    McU,
    Lyapunov,
    Mgf,
    BbmreW,
    Couple,
    Exp(Experiment),
}

impl fmt::Display for Task {
    fn fmt(&self, out: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Exp(e) => {
                let v = clap::ValueEnum::to_possible_value(e).expect("every experiment has a name");
                write!(out, "exp:{}", v.get_name())
            }
            _ => out.write_str(serde_json::to_string(self).expect("task serializes").trim_matches('"')),
        }
    }
}

fn plain(files: Vec<OutputFile>) -> RunOutput {
    RunOutput { files, verdict: None }
}

pub fn run_task(task: Task, cfg: &ExperimentConfig, force: bool) -> anyhow::Result<RunOutput> {
    cfg.validate()?;
    match task {
        Task::Potential => potential(cfg),
        Task::Solve | Task::Fronts => fronts(cfg, task == Task::Solve),
        Task::McU => mc_u(cfg),
        Task::Lyapunov => lyapunov(cfg),
        Task::Mgf => mgf(cfg),
        Task::BbmreW => bbmre_w(cfg),
        Task::Couple => couple(cfg),
        Task::Exp(e) => match e {
            Experiment::PamWidth => experiments::pam_width(cfg, force),
            Experiment::FkppWidth => experiments::fkpp_width(cfg, force),
            Experiment::Nonmonotone => experiments::nonmonotone(cfg, force),
            Experiment::VelScan => experiments::vel_scan(cfg),
            Experiment::Coupling => experiments::coupling(cfg, force),
        },
    }
}

fn potential(cfg: &ExperimentConfig) -> anyhow::Result<RunOutput> {
    let p = &cfg.potential;
    let lattice = discretize(&p.medium()?, p.dump_dx, (p.window[0], p.window[1]))?;
    Ok(plain(vec![OutputFile::new("potential.csv", lattice.to_csv())]))
}

fn fronts(cfg: &ExperimentConfig, with_field: bool) -> anyhow::Result<RunOutput> {
    let medium = cfg.potential.medium()?;
    let s = &cfg.solver;
    let traj = solve(s.field.kind(), &medium, &s.nonlinearity(), &s.init(), s.t_end, &s.solver_config(medium.es()))?;
    let mut files = vec![OutputFile::new("fronts.csv", traj.csv())];
    if with_field {
        let mut body = format!("{SNAPSHOT_HEADER}\n");
        traj.last.snapshot_csv_rows(&mut body);
        files.push(OutputFile::new("field.csv", body));
    }
    Ok(plain(files))
}

fn mc_u(cfg: &ExperimentConfig) -> anyhow::Result<RunOutput> {
    let m = &cfg.mc;
    let e = estimate_u_mc(&cfg.potential.medium()?, m.t, m.x, &cfg.solver.init(), m.n_paths, m.dt, cfg.seed())?;
    let body = format!("t,x,u_hat,se,n_paths,dt\n{},{},{},{},{},{}\n", f(m.t), f(m.x), f(e.value), f(e.standard_error), e.n_paths, f(e.dt));
    Ok(plain(vec![OutputFile::new("mc_u.csv", body)]))
}

fn lyapunov(cfg: &ExperimentConfig) -> anyhow::Result<RunOutput> {
    let medium = cfg.potential.medium()?;
    let m = &cfg.mc;
    let lc = LyapunovConfig { dx: cfg.solver.dx, ..Default::default() };
    let curve = estimate_lyapunov(&medium, &m.v_grid, m.lyapunov_t, &lc)?;
    let v0 = estimate_v0(&medium, &V0Config { t: m.lyapunov_t, lyapunov: lc, ..Default::default() })?;
    let v0_body = format!("v0,bracket_low,bracket_high,method\n{},{},{},{}\n", f(v0.v0), f(v0.bracket.0), f(v0.bracket.1), curve.method);
    Ok(plain(vec![OutputFile::new("lyapunov.csv", curve.csv()), OutputFile::new("v0.csv", v0_body)]))
}

fn mgf(cfg: &ExperimentConfig) -> anyhow::Result<RunOutput> {
    let medium = cfg.potential.medium()?;
    let m = &cfg.mc;
    let mc = MgfConfig { n_paths: m.mgf_paths, seed: cfg.seed(), ..Default::default() };
    let mut body = String::from("eta,L_hat,L_prime_hat,se,method\n");
    for &eta in &m.etas {
        let l = estimate_l(&medium, eta, m.units, &mc)?;
        let d = estimate_l_prime(&medium, eta, m.units, &mc)?;
        body.push_str(&format!("{},{},{},{},tilted-mean\n", f(eta), f(l.l_hat), f(d.method_a), f(l.se)));
        body.push_str(&format!("{},{},{},{},finite-difference\n", f(eta), f(l.l_hat), f(d.method_b), f(l.se)));
    }
    Ok(plain(vec![OutputFile::new("mgf.csv", body)]))
}

fn bbmre_w(cfg: &ExperimentConfig) -> anyhow::Result<RunOutput> {
    let m = &cfg.mc;
    let target = match m.target {
        TargetSide::Below => Target::AtOrBelow(m.level),
        TargetSide::Above => Target::AtOrAbove(m.level),
    };
    let bc = BbmConfig { dt: m.bbm_dt, cap: m.cap, genealogy: false };
    let e = estimate_w(&cfg.potential.medium()?, m.x, m.t, target, &OffspringDistribution::binary(), m.n_reps, &bc, cfg.seed())?;
    let body = format!(
        "x,t,w_hat,se,n_reps,indeterminate_frac\n{},{},{},{},{},{}\n",
        f(m.x),
        f(m.t),
        f(e.w_hat),
        f(e.se),
        e.n_reps,
        f(e.indeterminate_frac)
    );
    Ok(plain(vec![OutputFile::new("bbmre_w.csv", body)]))
}

fn couple(cfg: &ExperimentConfig) -> anyhow::Result<RunOutput> {
    let lambda = cfg.coupling.lambdas[0];
    let pt = experiments::coupling_point(cfg, lambda, cfg.seed())?;
    let summary = format!("{}\n{}\n", experiments::AGGREGATE_HEADER, pt.aggregate_row());
    Ok(plain(vec![OutputFile::new("coupling_replicates.csv", pt.replicates), OutputFile::new("coupling_summary.csv", summary)]))
}
