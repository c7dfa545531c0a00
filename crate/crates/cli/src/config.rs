//! Sectioned experiment configuration.

use std::fmt;
use std::path::Path;

use frontlab::branching_law::Nonlinearity;
use frontlab::environment::{engineer_stretch_potential, BumpProfile, ConstantPotential, PoissonBumpPotential, Potential, ScaledPotential};
use frontlab::pde_solver::{FieldKind, InitialCondition, SolverConfig, WindowPolicy};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub potential: PotentialSection,
    pub solver: SolverSection,
    pub mc: McSection,
    pub coupling: CouplingSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self { name: "unnamed".into(), seeds: vec![1] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PotentialKind {
    Constant,
    Poisson,
    Engineered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PotentialSection {
    pub kind: PotentialKind,
    /// Value of the constant potential.
    pub c: f64,
    pub ei: f64,
    pub es: f64,
    pub intensity: f64,
    pub window: [f64; 2],
    pub seed: u64,
    /// The medium is C·ξ.
    pub scale: f64,
    /// Engineered stretch half-length Λ and position x_n.
    pub lambda: f64,
    pub x_n: f64,
    /// Stretch scan parameters for Poisson media.
    pub c0: Option<f64>,
    pub n_range: [u64; 2],
    /// Grid spacing for the `potential` dump.
    pub dump_dx: f64,
}

impl Default for PotentialSection {
    fn default() -> Self {
        Self {
            kind: PotentialKind::Constant,
            c: 1.0,
            ei: 1.0,
            es: 3.0,
            intensity: 1.0,
            window: [-300.0, 400.0],
            seed: 1,
            scale: 1.0,
            lambda: 15.0,
            x_n: 60.0,
            c0: None,
            n_range: [20, 60],
            dump_dx: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Pam,
    Fkpp,
}

impl Field {
    pub fn kind(self) -> FieldKind {
        match self {
            Self::Pam => FieldKind::Pam,
            Self::Fkpp => FieldKind::Fkpp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    Heaviside,
    /// δ·1_{[−δ, 0]} with δ = `init_height`.
    Box,
    /// C·1_{(−∞, 0]} with C = `init_height`.
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub field: Field,
    pub init: Init,
    pub init_height: f64,
    pub dx: f64,
    /// Omitted: the largest stable step.
    pub dt: Option<f64>,
    pub t_end: f64,
    pub cadence: f64,
    pub eps: f64,
    pub big_m: f64,
    /// Omitted: 30 + 10√t_end.
    pub margin: Option<f64>,
    pub burn_in: f64,
    /// Level δ whose passage of x_n defines t_n.
    pub delta: f64,
    /// Gap ε in the non-monotonicity filter and the stretch inequality.
    pub witness_eps: f64,
    pub min_sep: f64,
    /// Omitted: 2Λ.
    pub max_sep: Option<f64>,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            field: Field::Fkpp,
            init: Init::Heaviside,
            init_height: 1.0,
            dx: 0.05,
            dt: None,
            t_end: 40.0,
            cadence: 0.5,
            eps: 0.1,
            big_m: 10.0,
            margin: None,
            burn_in: 5.0,
            delta: 0.5,
            witness_eps: 0.05,
            min_sep: 2.0,
            max_sep: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSide {
    Below,
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSection {
    /// Evaluation point for `mc-u` and `bbmre-w`.
    pub t: f64,
    pub x: f64,
    pub n_paths: usize,
    pub dt: f64,
    pub n_reps: usize,
    pub bbm_dt: f64,
    pub cap: usize,
    pub target: TargetSide,
    /// Target level for `bbmre-w`.
    pub level: f64,
    pub mgf_paths: usize,
    pub units: usize,
    pub etas: Vec<f64>,
    pub scalings: Vec<f64>,
    /// η̄ is reported at these multiples of v̂_0.
    pub eta_bar_multiples: Vec<f64>,
    pub v_grid: Vec<f64>,
    pub lyapunov_t: f64,
}

impl Default for McSection {
    fn default() -> Self {
        Self {
            t: 1.0,
            x: 0.0,
            n_paths: 20_000,
            dt: 0.005,
            n_reps: 10_000,
            bbm_dt: 0.05,
            cap: 1_000_000,
            target: TargetSide::Below,
            level: 0.0,
            mgf_paths: 2000,
            units: 20,
            etas: vec![-3.0, -2.0, -1.0, -0.5],
            scalings: vec![1.0, 2.0, 4.0, 8.0],
            eta_bar_multiples: vec![1.0],
            v_grid: vec![0.5, 1.0, 1.5, 2.0, 2.5],
            lyapunov_t: 30.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingMode {
    Full,
    Reduced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CouplingSection {
    pub lambdas: Vec<f64>,
    pub reps: usize,
    pub dt: f64,
    pub delta1: Option<f64>,
    pub mode: CouplingMode,
    pub free_keep: usize,
    /// Required freq(G1 ∧ G2) at every Λ.
    pub target: f64,
}

impl Default for CouplingSection {
    fn default() -> Self {
        Self {
            lambdas: vec![10.0, 15.0, 20.0],
            reps: 200,
            dt: 1e-3,
            delta1: None,
            mode: CouplingMode::Reduced,
            free_keep: 512,
            target: 0.7,
        }
    }
}

/// The medium a config describes, before scaling.
#[derive(Debug, Clone)]
pub enum Base {
    Constant(ConstantPotential),
    Bumps(PoissonBumpPotential),
}

impl Potential for Base {
    fn value(&self, x: f64) -> f64 {
        match self {
            Self::Constant(p) => p.value(x),
            Self::Bumps(p) => p.value(x),
        }
    }
    fn ei(&self) -> f64 {
        match self {
            Self::Constant(p) => p.ei(),
            Self::Bumps(p) => p.ei(),
        }
    }
    fn es(&self) -> f64 {
        match self {
            Self::Constant(p) => p.es(),
            Self::Bumps(p) => p.es(),
        }
    }
    fn domain(&self) -> (f64, f64) {
        match self {
            Self::Constant(p) => p.domain(),
            Self::Bumps(p) => p.domain(),
        }
    }
}

pub type Medium = ScaledPotential<Base>;

fn bad(msg: impl fmt::Display) -> CliError {
    CliError::Config(msg.to_string())
}

impl PotentialSection {
    pub fn base(&self) -> anyhow::Result<Base> {
        let window = (self.window[0], self.window[1]);
        Ok(match self.kind {
            PotentialKind::Constant => {
                if !(self.c > 0.0 && self.c.is_finite()) {
                    return Err(bad(format!("constant potential needs c > 0, got {}", self.c)).into());
                }
                Base::Constant(ConstantPotential::new(self.c))
            }
            PotentialKind::Poisson => {
                Base::Bumps(PoissonBumpPotential::sample(self.ei, self.es, self.intensity, BumpProfile::default(), window, self.seed)?)
            }
            PotentialKind::Engineered => Base::Bumps(engineer_stretch_potential(self.ei, self.es, self.lambda, self.x_n, window)?),
        })
    }

    pub fn medium(&self) -> anyhow::Result<Medium> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(bad(format!("scale must be positive, got {}", self.scale)).into());
        }
        Ok(ScaledPotential::new(self.base()?, self.scale))
    }

    /// (ei, es) of the scaled medium.
    pub fn bounds(&self) -> (f64, f64) {
        match self.kind {
            PotentialKind::Constant => (self.c * self.scale, self.c * self.scale),
            _ => (self.ei * self.scale, self.es * self.scale),
        }
    }
}

impl SolverSection {
    pub fn init(&self) -> InitialCondition {
        match self.init {
            Init::Heaviside => InitialCondition::Heaviside,
            Init::Box => InitialCondition::Box { height: self.init_height, width: self.init_height },
            Init::Step => InitialCondition::Step { height: self.init_height },
        }
    }

    pub fn solver_config(&self, es: f64) -> SolverConfig {
        SolverConfig {
            dx: self.dx,
            dt: self.dt.unwrap_or_else(|| SolverConfig::stable_dt(self.dx, es)),
            window: WindowPolicy::Track { margin: self.margin },
            cadence: Some(self.cadence),
            eps: self.eps,
            big_m: self.big_m,
            ..Default::default()
        }
    }

    pub fn nonlinearity(&self) -> Nonlinearity {
        Nonlinearity::binary()
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| bad(e.to_string()).into())
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn seed(&self) -> u64 {
        self.experiment.seeds[0]
    }

    /// Checks every section against the module that will consume it.
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.experiment.seeds.is_empty() {
            return Err(bad("experiment.seeds must not be empty").into());
        }
        if self.experiment.seeds.iter().any(|&s| s > i64::MAX as u64) {
            return Err(bad("seeds must fit in a signed 64-bit integer").into());
        }
        let p = &self.potential;
        if !(p.window[0] < p.window[1]) {
            return Err(bad("potential.window must be increasing").into());
        }
        let medium = p.medium()?;
        let s = &self.solver;
        s.solver_config(medium.es()).validate(medium.es())?;
        if !(s.t_end > 0.0 && s.cadence > 0.0 && s.burn_in >= 0.0 && s.burn_in < s.t_end) {
            return Err(bad("solver needs t_end > burn_in >= 0 and cadence > 0").into());
        }
        if !(s.delta > 0.0 && s.delta < 1.0 && s.witness_eps > 0.0 && s.min_sep >= 0.0) {
            return Err(bad("solver needs 0 < delta < 1, witness_eps > 0 and min_sep >= 0").into());
        }
        if s.init != Init::Heaviside && !(s.init_height > 0.0) {
            return Err(bad("init_height must be positive").into());
        }
        let m = &self.mc;
        if m.n_paths < 2 || m.n_reps == 0 || m.mgf_paths < 2 || m.units == 0 || m.cap < 1 {
            return Err(bad("mc sizes must be positive (n_paths, mgf_paths >= 2)").into());
        }
        if !(m.dt > 0.0 && m.bbm_dt > 0.0 && m.lyapunov_t > 0.0) {
            return Err(bad("mc time steps must be positive").into());
        }
        if m.etas.iter().any(|&e| !(e < -1e-3)) {
            return Err(bad("mc.etas must all be below -1e-3").into());
        }
        if m.scalings.iter().any(|&c| !(c > 0.0)) {
            return Err(bad("mc.scalings must be positive").into());
        }
        let c = &self.coupling;
        if c.lambdas.is_empty() || c.lambdas.iter().any(|&l| !(l > 2.0)) || c.reps == 0 || !(c.dt > 0.0) || c.free_keep == 0 {
            return Err(bad("coupling needs lambdas > 2, reps > 0, dt > 0 and free_keep > 0").into());
        }
        if !(0.0..=1.0).contains(&c.target) {
            return Err(bad("coupling.target must lie in [0, 1]").into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn sections_are_optional() {
        let c = ExperimentConfig::from_toml("[potential]\nkind = \"poisson\"\nes = 5.0\n").unwrap();
        assert_eq!(c.potential.kind, PotentialKind::Poisson);
        assert_eq!(c.potential.es, 5.0);
        assert_eq!(c.solver, SolverSection::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml("[solver]\nspeed = 2.0\n").is_err());
    }

    #[test]
    fn unstable_step_rejected() {
        let mut c = ExperimentConfig::default();
        c.solver.dt = Some(0.1);
        assert!(c.validate().is_err());
    }
}
