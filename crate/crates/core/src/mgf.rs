//! Logarithmic moment generating functions of ∫_0^{H_0}(ζ + η), tilted
//! hitting-time expectations, η̄(v), η_x(v), v_c and the VEL check.
//!
//! Quantities over [0, x] are assembled from unit crossings i → i−1; by the
//! strong Markov property x·L̄_x = Σ_i L_i, which keeps each Monte Carlo
//! average away from the extreme weight degeneracy of a single long crossing.

use rayon::prelude::*;

use crate::environment::{Potential, ScaledPotential};
use crate::error::{config, Error, Result};
use crate::feynman_kac::{estimate_v0, simulate_until_hit, HitOptions, HitSample, V0Config};
use crate::rng;
use crate::stats::linear_fit;

/// ζ = ξ − es ≤ 0.
pub struct ShiftedPotential<P> {
    base: P,
    es: f64,
}

impl<P: Potential> ShiftedPotential<P> {
    pub fn new(base: P) -> Self {
        let es = base.es();
        Self { base, es }
    }
}

impl<P: Potential> Potential for ShiftedPotential<P> {
    fn value(&self, x: f64) -> f64 {
        self.base.value(x) - self.es
    }
    fn ei(&self) -> f64 {
        self.base.ei() - self.es
    }
    fn es(&self) -> f64 {
        0.0
    }
    fn domain(&self) -> (f64, f64) {
        self.base.domain()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MgfVariant {
    UnitInterval,
    Averaged,
    Ensemble,
    Direct,
}

impl MgfVariant {
    pub fn name(self) -> &'static str {
        match self {
            Self::UnitInterval => "unit",
            Self::Averaged => "averaged",
            Self::Ensemble => "ensemble",
            Self::Direct => "direct",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MgfEstimate {
    pub eta: f64,
    pub x: f64,
    /// Per-unit value: ln E[...] / x.
    pub l_hat: f64,
    pub se: f64,
    pub n_paths: usize,
    pub variant: MgfVariant,
    /// Smallest effective sample size over the units.
    pub ess_min: f64,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct MgfConfig {
    /// Paths per unit crossing.
    pub n_paths: usize,
    pub hit: HitOptions,
    pub seed: u64,
}

impl Default for MgfConfig {
    fn default() -> Self {
        Self { n_paths: 2000, hit: HitOptions::default(), seed: 1 }
    }
}

/// Weighted statistics of one batch of crossings at a given η.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitStats {
    pub l: f64,
    pub se_l: f64,
    /// Tilted mean of the crossing time.
    pub lp: f64,
    pub se_lp: f64,
    /// Tilted variance of the crossing time.
    pub lpp: f64,
    pub ess: f64,
}

pub fn unit_stats(samples: &[HitSample], eta: f64) -> UnitStats {
    let n = samples.len() as f64;
    let logs: Vec<f64> = samples.iter().map(|s| s.log_weight(eta)).collect();
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return UnitStats { l: f64::NEG_INFINITY, se_l: f64::INFINITY, lp: f64::NAN, se_lp: f64::INFINITY, lpp: f64::NAN, ess: 0.0 };
    }
    let w: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let sw: f64 = w.iter().sum();
    let sw2: f64 = w.iter().map(|x| x * x).sum();
    let mean_w = sw / n;
    let var_w = (sw2 / n - mean_w * mean_w).max(0.0) * n / (n - 1.0);
    let l = mean_w.ln() + m;
    let se_l = (var_w / n).sqrt() / mean_w;
    let lp: f64 = w.iter().zip(samples).map(|(w, s)| w * s.hit_time).sum::<f64>() / sw;
    let lpp: f64 = w.iter().zip(samples).map(|(w, s)| w * (s.hit_time - lp).powi(2)).sum::<f64>() / sw;
    let se_lp = (w.iter().zip(samples).map(|(w, s)| (w * (s.hit_time - lp)).powi(2)).sum::<f64>()).sqrt() / sw;
    UnitStats { l, se_l, lp, se_lp, lpp, ess: sw * sw / sw2 }
}

/// Crossings from `start` to `start − 1`, stopped at the weight floor for `eta_floor`.
///
/// Each path owns its random stream, so runs at different η share common
/// random numbers path by path even when truncation times differ.
pub fn unit_samples(
    zeta: &dyn Potential,
    start: f64,
    eta_floor: f64,
    n: usize,
    opts: &HitOptions,
    seed: u64,
    stream: u64,
) -> Result<Vec<HitSample>> {
    crossing_samples(zeta, start, start - 1.0, eta_floor, n, opts, seed, stream)
}

#[allow(clippy::too_many_arguments)]
fn crossing_samples(
    zeta: &dyn Potential,
    start: f64,
    target: f64,
    eta_floor: f64,
    n: usize,
    opts: &HitOptions,
    seed: u64,
    stream: u64,
) -> Result<Vec<HitSample>> {
    (0..n)
        .into_par_iter()
        .with_min_len(64)
        .map(|i| {
            let mut r = rng::stream(seed, rng::substream(stream, i as u64));
            simulate_until_hit(zeta, start, target, eta_floor, opts, &mut r)
        })
        .collect()
}

/// Unit statistics for the crossings i → i−1, i = 1..=units, of one realization.
pub fn unit_decomposition(pot: &dyn Potential, eta: f64, units: usize, cfg: &MgfConfig) -> Result<Vec<UnitStats>> {
    if !(eta < 0.0) {
        return config(format!("eta must be negative, got {eta}"));
    }
    let zeta = ShiftedPotential::new(pot);
    (1..=units)
        .map(|i| {
            let s = unit_samples(&zeta, i as f64, eta, cfg.n_paths, &cfg.hit, cfg.seed, 0x100 + i as u64)?;
            Ok(unit_stats(&s, eta))
        })
        .collect()
}

fn aggregate(eta: f64, units: &[UnitStats], n_paths: usize, variant: MgfVariant) -> MgfEstimate {
    let x = units.len() as f64;
    let l_hat = units.iter().map(|u| u.l).sum::<f64>() / x;
    let se = units.iter().map(|u| u.se_l * u.se_l).sum::<f64>().sqrt() / x;
    let ess_min = units.iter().map(|u| u.ess).fold(f64::INFINITY, f64::min);
    let warning = (ess_min < 100.0).then(|| format!("effective sample size {ess_min:.1} < 100; weights are degenerate"));
    MgfEstimate { eta, x, l_hat, se, n_paths, variant, ess_min, warning }
}

/// L̄_x(η) = (1/x) ln E_x[exp ∫_0^{H_0}(ζ+η)] for ζ = ξ − es.
pub fn estimate_l(pot: &dyn Potential, eta: f64, x_max: usize, cfg: &MgfConfig) -> Result<MgfEstimate> {
    if !(eta < -1e-3) {
        return config(format!("eta must be below -1e-3, got {eta}"));
    }
    if x_max < 1 {
        return config("x_max must be >= 1");
    }
    let units = unit_decomposition(pot, eta, x_max, cfg)?;
    let variant = if x_max == 1 { MgfVariant::UnitInterval } else { MgfVariant::Averaged };
    Ok(aggregate(eta, &units, cfg.n_paths * x_max, variant))
}

/// Single-crossing estimate from x straight to 0; only sensible for small x.
pub fn estimate_l_direct(pot: &dyn Potential, eta: f64, x: f64, cfg: &MgfConfig) -> Result<MgfEstimate> {
    let zeta = ShiftedPotential::new(pot);
    let samples = crossing_samples(&zeta, x, 0.0, eta, cfg.n_paths, &cfg.hit, cfg.seed, 0xd1)?;
    let st = unit_stats(&samples, eta);
    Ok(MgfEstimate {
        eta,
        x,
        l_hat: st.l / x,
        se: st.se_l / x,
        n_paths: cfg.n_paths,
        variant: MgfVariant::Direct,
        ess_min: st.ess,
        warning: (st.ess < 100.0).then(|| format!("effective sample size {:.1} < 100", st.ess)),
    })
}

/// Average of L̄ over independent potential realizations.
pub fn estimate_l_ensemble<P, F>(make: F, seeds: &[u64], eta: f64, x_max: usize, cfg: &MgfConfig) -> Result<MgfEstimate>
where
    P: Potential,
    F: Fn(u64) -> Result<P>,
{
    if seeds.len() < 10 {
        return config("ensemble estimates need at least 10 potential seeds");
    }
    let mut vals = Vec::with_capacity(seeds.len());
    let mut ess_min = f64::INFINITY;
    for &s in seeds {
        let pot = make(s)?;
        let e = estimate_l(&pot, eta, x_max, &MgfConfig { seed: rng::substream(cfg.seed, s), ..*cfg })?;
        ess_min = ess_min.min(e.ess_min);
        vals.push(e.l_hat);
    }
    let (mean, se) = crate::stats::mean_se(&vals);
    Ok(MgfEstimate {
        eta,
        x: x_max as f64,
        l_hat: mean,
        se,
        n_paths: cfg.n_paths * x_max * seeds.len(),
        variant: MgfVariant::Ensemble,
        ess_min,
        warning: (ess_min < 100.0).then(|| format!("effective sample size {ess_min:.1} < 100")),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LPrimeEstimate {
    pub eta: f64,
    /// Self-normalized tilted mean crossing time per unit.
    pub method_a: f64,
    pub se_a: f64,
    /// Central difference of L̄ with step 0.01|η| on common random numbers.
    pub method_b: f64,
    pub discrepancy: f64,
}

pub fn estimate_l_prime(pot: &dyn Potential, eta: f64, x_max: usize, cfg: &MgfConfig) -> Result<LPrimeEstimate> {
    let units = unit_decomposition(pot, eta, x_max, cfg)?;
    let (a, se_a) = tilted_mean(&units);
    let h = 1e-2 * eta.abs();
    let up = estimate_l(pot, eta + h, x_max, cfg)?;
    let down = estimate_l(pot, eta - h, x_max, cfg)?;
    let b = (up.l_hat - down.l_hat) / (2.0 * h);
    let discrepancy = (a - b).abs();
    if discrepancy > 3.0 * se_a {
        return Err(Error::Inconsistency(format!("L'({eta}): tilted mean {a} vs finite difference {b} differ by more than 3 SE ({se_a})")));
    }
    Ok(LPrimeEstimate { eta, method_a: a, se_a, method_b: b, discrepancy })
}

fn tilted_mean(units: &[UnitStats]) -> (f64, f64) {
    let x = units.len() as f64;
    let v = units.iter().map(|u| u.lp).sum::<f64>() / x;
    let se = units.iter().map(|u| u.se_lp * u.se_lp).sum::<f64>().sqrt() / x;
    (v, se)
}

/// Root in η ∈ [−50, −1e−3] of the per-unit tilted mean crossing time = 1/v,
/// bisected in ln|η| with fixed seeds at every step.
fn solve_tilted_root(pot: &dyn Potential, v: f64, units: usize, cfg: &MgfConfig) -> Result<f64> {
    if !(v > 0.0) {
        return config("velocity must be positive");
    }
    let target = 1.0 / v;
    let g = |eta: f64| -> Result<f64> { Ok(tilted_mean(&unit_decomposition(pot, eta, units, cfg)?).0 - target) };
    // g increases with η.
    let (mut lo, mut hi) = (-50.0f64, -1e-3f64);
    if g(lo)? > 0.0 {
        return Err(Error::Config(format!("v = {v} exceeds the range covered by eta >= -50")));
    }
    let mut hi_checked = false;
    while hi - lo > 1e-3 {
        let mid = -((lo.abs().ln() + hi.abs().ln()) * 0.5).exp();
        let mid = if mid - lo < 1e-4 || hi - mid < 1e-4 { 0.5 * (lo + hi) } else { mid };
        if g(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
            hi_checked = true;
        }
    }
    if !hi_checked && g(-1e-3)? < 0.0 {
        return Err(Error::SubcriticalVelocity { v, detail: "tilted crossing time stays below 1/v up to eta = -1e-3".into() });
    }
    Ok(0.5 * (lo + hi))
}

/// η̄(v): root of L′(η) = 1/v, with L′ averaged over `units` crossings.
pub fn solve_eta_bar(pot: &dyn Potential, v: f64, units: usize, cfg: &MgfConfig) -> Result<f64> {
    solve_tilted_root(pot, v, units, cfg)
}

/// η_x(v): root of E_x^{ζ,η}[H_0] = x/v for this realization.
pub fn solve_eta_x(pot: &dyn Potential, x: usize, v: f64, cfg: &MgfConfig) -> Result<f64> {
    if x < 10 {
        return config(format!("x must be >= 10, got {x}"));
    }
    solve_tilted_root(pot, v, x, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SValue {
    pub value: f64,
    pub se: f64,
}

/// S = x (η/v − L̄_x(η)).
pub fn compute_s(pot: &dyn Potential, x: usize, v: f64, eta: f64, cfg: &MgfConfig) -> Result<SValue> {
    if !(eta < 0.0) || x == 0 {
        return config("need eta < 0 and x > 0");
    }
    let units = unit_decomposition(pot, eta, x, cfg)?;
    let e = aggregate(eta, &units, cfg.n_paths * x, MgfVariant::Averaged);
    let xf = x as f64;
    Ok(SValue { value: xf * (eta / v - e.l_hat), se: xf * e.se })
}

pub const VC_ETAS: [f64; 5] = [-0.4, -0.2, -0.1, -0.05, -0.025];

#[derive(Debug, Clone, PartialEq)]
pub struct VcEstimate {
    /// Fitted intercept clamped at 0.
    pub vc: f64,
    pub intercept: f64,
    pub se: f64,
    pub slope: f64,
    pub residual: f64,
    /// (η, L′(η), SE).
    pub points: Vec<(f64, f64, f64)>,
    pub warning: Option<String>,
}

/// Fit 1/L′(η) = v_c + a√|η| on the fixed η grid.
pub fn estimate_vc(pot: &dyn Potential, units: usize, cfg: &MgfConfig) -> Result<VcEstimate> {
    let mut points = Vec::new();
    for &eta in &VC_ETAS {
        let (lp, se) = tilted_mean(&unit_decomposition(pot, eta, units, cfg)?);
        points.push((eta, lp, se));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.abs().sqrt()).collect();
    let ys: Vec<f64> = points.iter().map(|p| 1.0 / p.1).collect();
    let fit = linear_fit(&xs, &ys);
    let vc = fit.intercept.max(0.0);
    let warning = (fit.rms_residual > 0.1 * vc).then(|| format!("fit residual {:.3e} exceeds 10% of v_c = {vc:.3e}", fit.rms_residual));
    Ok(VcEstimate { vc, intercept: fit.intercept, se: fit.se_intercept, slope: fit.slope, residual: fit.rms_residual, points, warning })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityReport {
    pub scale: f64,
    pub vc: VcEstimate,
    pub v0: f64,
    pub v0_bracket: (f64, f64),
    pub joint_uncertainty: f64,
    pub vel_ok: bool,
    /// (v, η̄(v)).
    pub eta_bar: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct VelConfig {
    pub units: usize,
    pub mgf: MgfConfig,
    pub v0: V0Config,
    /// η̄ is sampled at these multiples of v̂_0.
    pub eta_bar_multiples: Vec<f64>,
    /// Finite-time allowance on v̂_0.
    pub v0_tolerance: f64,
}

impl Default for VelConfig {
    fn default() -> Self {
        Self { units: 20, mgf: MgfConfig::default(), v0: V0Config::default(), eta_bar_multiples: vec![0.8, 1.0, 1.2], v0_tolerance: 0.05 }
    }
}

pub fn velocity_report(pot: &dyn Potential, scale: f64, cfg: &VelConfig) -> Result<VelocityReport> {
    let vc = estimate_vc(pot, cfg.units, &cfg.mgf)?;
    let v0 = estimate_v0(pot, &cfg.v0)?;
    let half = 0.5 * (v0.bracket.1 - v0.bracket.0);
    let joint_uncertainty = 2.0 * (vc.se * vc.se + half * half).sqrt() + vc.residual + cfg.v0_tolerance;
    let vel_ok = v0.v0 > vc.vc + joint_uncertainty;
    let mut eta_bar = Vec::new();
    for &m in &cfg.eta_bar_multiples {
        let v = m * v0.v0;
        if v > 1.05 * vc.vc {
            eta_bar.push((v, solve_eta_bar(pot, v, cfg.units, &cfg.mgf)?));
        }
    }
    Ok(VelocityReport { scale, vc, v0: v0.v0, v0_bracket: v0.bracket, joint_uncertainty, vel_ok, eta_bar })
}

/// Velocity reports for C·ξ over the given scalings.
pub fn check_vel<P: Potential + Clone>(pot: &P, scalings: &[f64], cfg: &VelConfig) -> Result<Vec<VelocityReport>> {
    scalings.iter().map(|&c| velocity_report(&ScaledPotential::new(pot.clone(), c), c, cfg)).collect()
}
