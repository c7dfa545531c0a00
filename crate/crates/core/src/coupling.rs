//! Coupling of two BBMREs started at l < r with typed particles.
//!
//! Left system: LM (mirrored), LC (coupled), Bad. Right system: RM, RC, Free.
//! Positions are stored as offsets from the midpoint m, so the mirror identity
//! d_left = -d_right holds exactly in floating point.
//!
//! `Mode::Full` tracks every particle. `Mode::Reduced` tracks LM/RM pairs and
//! the leftmost free particles explicitly and resolves every other subtree by
//! a single draw against F-KPP probabilities: a subtree born at y at time τ
//! reaches (−∞, L] before t_check with probability q_hit and sits there at
//! t_check with probability q_end.

use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;

use crate::branching_law::{Nonlinearity, OffspringDistribution};
use crate::environment::{check_domain, Potential};
use crate::error::{config, Error, Result};
use crate::pde_solver::{solve_with, FieldKind, InitialCondition, SolverConfig, WindowPolicy};
use crate::rng::{self, Rng};
use crate::stats::wilson_interval;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasibleParameters {
    pub a: f64,
    pub b1: f64,
    pub b2: f64,
    pub delta1: f64,
    pub delta2: f64,
    /// Open interval of admissible t′ for this δ1, already cut at 1 − 5δ1.
    pub window: (f64, f64),
    pub t_prime: f64,
    /// Maximizing s′ for the B1 and B2 expressions at the chosen t′.
    pub s_prime_neg: f64,
    pub s_prime_pos: f64,
    pub negsup: f64,
    pub possup: f64,
}

/// sup over s′ ∈ [0, t′] of t′ + A s′ − B/(t′ − s′), and its maximizer.
pub fn sup_ab(t: f64, a: f64, b: f64) -> (f64, f64) {
    let knee = (b / a).sqrt();
    if t > knee {
        ((1.0 + a) * t - 2.0 * (a * b).sqrt(), t - knee)
    } else {
        (t - b / t, 0.0)
    }
}

fn window_for(a: f64, delta1: f64) -> (f64, f64) {
    let b1 = (1.0 + 4.0 * delta1).powi(2);
    let b2 = (1.0 + 2.0 * delta1).powi(2);
    let lo = 2.0 * (a * b2).sqrt() / (1.0 + a);
    let hi = (2.0 * (a * b1).sqrt() / (1.0 + a)).min(1.0 - 5.0 * delta1);
    (lo, hi)
}

const DELTA1_STEP: f64 = 1e-4;
const DELTA1_MAX: f64 = 0.05;
const T_STEP: f64 = 1e-4;

/// Grid search for (δ1, t′, δ2). The objective is the smallest of the three
/// exponent margins: −negsup, possup and (1−5δ1)²/t′ − t′. With `delta1`
/// given only t′ is searched.
pub fn select_parameters(ei: f64, es: f64, delta1: Option<f64>) -> Result<FeasibleParameters> {
    if !(ei > 0.0 && es > ei && es.is_finite()) {
        return config(format!("need 0 < ei < es < inf, got ei = {ei}, es = {es}"));
    }
    let a = (es - ei) / ei;
    if a <= 1.0 {
        return Err(Error::Infeasible(format!("A = (es - ei)/ei = {a} <= 1: no t' can make the B2 supremum positive below 1 - 5 delta1")));
    }
    let deltas: Vec<f64> = match delta1 {
        Some(d) if d > 0.0 && d <= DELTA1_MAX => vec![d],
        Some(d) => return config(format!("delta1 must lie in (0, {DELTA1_MAX}], got {d}")),
        None => (1..=(DELTA1_MAX / DELTA1_STEP).round() as usize).map(|i| i as f64 * DELTA1_STEP).collect(),
    };
    let mut best: Option<(f64, f64, f64)> = None;
    for &d in &deltas {
        let (lo, hi) = window_for(a, d);
        if !(lo < hi) {
            continue;
        }
        let b1 = (1.0 + 4.0 * d).powi(2);
        let b2 = (1.0 + 2.0 * d).powi(2);
        let first = (lo / T_STEP).floor() as usize + 1;
        let last = (hi / T_STEP).ceil() as usize;
        for i in first..last {
            let t = i as f64 * T_STEP;
            if !(t > lo && t < hi) {
                continue;
            }
            let neg = sup_ab(t, a, b1).0;
            let pos = sup_ab(t, a, b2).0;
            let tub = (1.0 - 5.0 * d).powi(2) / t - t;
            let margin = (-neg).min(pos).min(tub);
            if best.is_none_or(|(m, _, _)| margin > m) {
                best = Some((margin, d, t));
            }
        }
    }
    let Some((margin, d, t)) = best else {
        return Err(Error::Infeasible(format!("no grid point satisfies both supremum conditions for A = {a}; try a larger delta1")));
    };
    if !(margin > 0.0) {
        return Err(Error::Infeasible(format!("best margin {margin} is not positive")));
    }
    let b1 = (1.0 + 4.0 * d).powi(2);
    let b2 = (1.0 + 2.0 * d).powi(2);
    let (negsup, s_neg) = sup_ab(t, a, b1);
    let (possup, s_pos) = sup_ab(t, a, b2);
    // Largest δ2 keeping the B2 supremum positive with A2 = (es(1−δ2) − ei)/ei.
    let pos_at = |d2: f64| sup_ab(t, (es * (1.0 - d2) - ei) / ei, b2).0;
    let (mut lo, mut hi) = (0.0, 1.0 - ei / es);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if pos_at(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(FeasibleParameters {
        a,
        b1,
        b2,
        delta1: d,
        delta2: 0.5 * lo,
        window: window_for(a, d),
        t_prime: t,
        s_prime_neg: s_neg,
        s_prime_pos: s_pos,
        negsup,
        possup,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Full,
    Reduced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingConfig {
    pub ei: f64,
    pub es: f64,
    pub x_n: f64,
    pub phi: f64,
    pub delta1: f64,
    pub l: f64,
    pub r: f64,
    pub m: f64,
    pub big_l: f64,
    pub big_r: f64,
    pub dt: f64,
    pub t_check: f64,
    pub mode: Mode,
    /// Explicit free particles kept in reduced mode while mirrored pairs exist.
    pub free_keep: usize,
    pub cap: usize,
    /// Trace sampling interval in time units.
    pub sample_every: f64,
}

impl CouplingConfig {
    /// Geometry l = x_n − 4δ1φ, r = x_n + 2δ1φ, L = x_n − φ, t_check = t′φ/√(2 ei).
    pub fn new(ei: f64, es: f64, x_n: f64, phi: f64, params: &FeasibleParameters) -> Result<Self> {
        let d = params.delta1;
        Self::with_geometry(ei, es, x_n, phi, d, x_n - 4.0 * d * phi, x_n + 2.0 * d * phi, params.t_prime * phi / (2.0 * ei).sqrt())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_geometry(ei: f64, es: f64, x_n: f64, phi: f64, delta1: f64, l: f64, r: f64, t_check: f64) -> Result<Self> {
        let m = 0.5 * (l + r);
        let big_l = x_n - phi;
        let cfg = Self {
            ei,
            es,
            x_n,
            phi,
            delta1,
            l,
            r,
            m,
            big_l,
            big_r: 2.0 * m - big_l,
            dt: 1e-3,
            t_check,
            mode: Mode::Reduced,
            free_keep: 512,
            cap: 1_000_000,
            sample_every: 0.05,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let dp = self.delta1 * self.phi;
        let tol = 1e-9 * (1.0 + self.x_n.abs());
        if !(self.phi > 0.0 && self.delta1 > 0.0) {
            return config("phi and delta1 must be positive");
        }
        if self.l < self.x_n - 5.0 * dp - tol || self.l > self.x_n - 4.0 * dp + tol {
            return config(format!("l = {} outside [x_n - 5 delta1 phi, x_n - 4 delta1 phi]", self.l));
        }
        if self.r < self.x_n + dp - tol || self.r > self.x_n + 2.0 * dp + tol {
            return config(format!("r = {} outside [x_n + delta1 phi, x_n + 2 delta1 phi]", self.r));
        }
        if !(self.big_l < self.l && self.l < self.m && self.m < self.r && self.r < self.big_r) {
            return config("geometry must satisfy L < l < m < r < R");
        }
        if !(self.dt > 0.0 && self.t_check > 0.0 && self.sample_every > 0.0) {
            return config("dt, t_check and sample_every must be positive");
        }
        if self.cap < 2 || self.free_keep < 1 {
            return config("cap must be >= 2 and free_keep >= 1");
        }
        Ok(())
    }

    /// The potential must be non-decreasing on [L, R] (sampled at 1/32), so
    /// the extra right-branching rate is non-negative and bounded by es − ei.
    pub fn check_potential(&self, pot: &dyn Potential) -> Result<()> {
        check_domain(pot, self.big_l, self.big_r)?;
        if (pot.ei() - self.ei).abs() > 1e-12 || (pot.es() - self.es).abs() > 1e-12 {
            return config(format!("potential bounds ({}, {}) differ from the configured ({}, {})", pot.ei(), pot.es(), self.ei, self.es));
        }
        let dx = 1.0 / 32.0;
        let n = ((self.big_r - self.big_l) / dx).ceil() as usize;
        let mut prev = pot.value(self.big_l);
        for i in 1..=n {
            let x = (self.big_l + i as f64 * dx).min(self.big_r);
            let v = pot.value(x);
            if v < prev - 1e-12 {
                return Err(Error::Domain(format!("potential decreases near {x} inside [L, R]")));
            }
            prev = v;
        }
        Ok(())
    }
}

/// F-KPP probabilities on a (remaining time, position) grid.
#[derive(Debug, Clone)]
pub struct QTables {
    times: Vec<f64>,
    x0: f64,
    dx: f64,
    hit: Vec<Vec<f64>>,
    end: Vec<Vec<f64>>,
}

impl QTables {
    pub fn build(pot: &dyn Potential, dist: &OffspringDistribution, cfg: &CouplingConfig) -> Result<Self> {
        let (dlo, dhi) = pot.domain();
        let lo = (cfg.big_l - 5.0).max(dlo);
        let hi = (cfg.big_r + 30.0).min(dhi);
        let dx = 0.05;
        let nl = Nonlinearity::new(dist.clone());
        let big_l = cfg.big_l;
        let init = InitialCondition::Custom(Arc::new(move |y| (y <= big_l) as u8 as f64));
        let run = |absorb: Option<f64>| -> Result<(Vec<f64>, Vec<Vec<f64>>, f64)> {
            let scfg = SolverConfig {
                dx,
                dt: SolverConfig::stable_dt(dx, pot.es()),
                window: WindowPolicy::Fixed { lo, hi },
                cadence: Some(0.02),
                absorb_below: absorb,
                ..Default::default()
            };
            let mut times = Vec::new();
            let mut rows = Vec::new();
            let mut x0 = 0.0;
            solve_with(FieldKind::Fkpp, pot, &nl, &init, cfg.t_check, &scfg, |f| {
                times.push(f.time);
                rows.push(f.values.clone());
                x0 = f.x(0);
                Ok(())
            })?;
            Ok((times, rows, x0))
        };
        let (times, hit, x0) = run(Some(big_l))?;
        let (_, end, _) = run(None)?;
        Ok(Self { times, x0, dx, hit, end })
    }

    fn lookup(&self, rows: &[Vec<f64>], s: f64, y: f64) -> f64 {
        let s = s.clamp(0.0, *self.times.last().unwrap());
        let j = self.times.partition_point(|&t| t <= s).clamp(1, self.times.len() - 1);
        let (t0, t1) = (self.times[j - 1], self.times[j]);
        let w = if t1 > t0 { (s - t0) / (t1 - t0) } else { 0.0 };
        let n = rows[0].len();
        let at = |row: &[f64]| -> f64 {
            let p = (y - self.x0) / self.dx;
            if p <= 0.0 {
                return row[0];
            }
            if p >= (n - 1) as f64 {
                return row[n - 1];
            }
            let i = p.floor() as usize;
            let f = p - i as f64;
            row[i] * (1.0 - f) + row[i + 1] * f
        };
        at(&rows[j - 1]) * (1.0 - w) + at(&rows[j]) * w
    }

    /// P_y(some particle reaches (−∞, L] within time s).
    pub fn q_hit(&self, s: f64, y: f64) -> f64 {
        self.lookup(&self.hit, s, y)
    }

    /// P_y(some particle lies in (−∞, L] at time s).
    pub fn q_end(&self, s: f64, y: f64) -> f64 {
        self.lookup(&self.end, s, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    Lm,
    Lc,
    Bad,
    Rm,
    Rc,
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TypedParticle {
    pub id: u64,
    pub position: f64,
    pub tag: Tag,
    pub partner_id: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PopulationSample {
    pub t: f64,
    pub lm: usize,
    pub lc: usize,
    pub bad: usize,
    pub rm: usize,
    pub rc: usize,
    pub free: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceSample {
    pub t: f64,
    /// Lowest explicit left position since the previous sample.
    pub min_left: f64,
    /// Lowest explicit right position at this time.
    pub min_right: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub big_l: f64,
    pub t_end: f64,
    pub samples: Vec<TraceSample>,
    /// First time an explicit left particle was detected at or below L.
    pub left_hit_time: Option<f64>,
    /// A resolved subtree reached (−∞, L] in the left system before t_check.
    pub resolved_left_hit: bool,
    /// A resolved subtree has a right particle in (−∞, L] at t_check.
    pub resolved_right_below: bool,
    pub lm_at_end: usize,
    pub bad_at_end: usize,
    pub final_particles: Vec<TypedParticle>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingOutcome {
    pub g1: bool,
    pub g2: bool,
    pub success: bool,
    pub capped: bool,
    pub n_bad_max: usize,
    pub n_lm_final: usize,
    /// Steps at which the rightmost LM sat right of the leftmost free particle.
    pub tau_violations: usize,
    /// Free subtrees resolved early because of the explicit-free limit.
    pub pruned: usize,
    pub populations: Vec<PopulationSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingRun {
    pub seed: u64,
    pub outcome: CouplingOutcome,
    pub trace: Trace,
}

pub const REPLICATE_HEADER: &str = "seed,G1,G2,success,n_bad_max,n_lm_final,capped";

impl CouplingRun {
    pub fn csv_row(&self) -> String {
        let o = &self.outcome;
        format!("{},{},{},{},{},{},{}", self.seed, o.g1, o.g2, o.success, o.n_bad_max, o.n_lm_final, o.capped)
    }
}

#[derive(Debug, Clone, Copy)]
struct MPair {
    id_l: u64,
    id_r: u64,
    d_l: f64,
    d_r: f64,
    ring_a: f64,
    ring_b: f64,
}

#[derive(Debug, Clone, Copy)]
struct CPair {
    id_l: u64,
    id_r: u64,
    d_l: f64,
    d_r: f64,
    ring: f64,
}

#[derive(Debug, Clone, Copy)]
struct Single {
    id: u64,
    d: f64,
    ring: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum EventKind {
    HitM,
    HitL,
    Meet(usize),
}

/// Probability that a Brownian bridge with variance rate `var` per unit time
/// dips below 0 between endpoints a, b > 0 over time dt.
fn bridge_dip(a: f64, b: f64, var_dt: f64) -> f64 {
    (-2.0 * a * b / var_dt).exp()
}

struct Sim<'a> {
    cfg: &'a CouplingConfig,
    pot: &'a dyn Potential,
    dist: &'a OffspringDistribution,
    tables: Option<&'a QTables>,
    r: Rng,
    t: f64,
    next_id: u64,
    mpairs: Vec<MPair>,
    cpairs: Vec<CPair>,
    frees: Vec<Single>,
    bads: Vec<Single>,
    n_bad_events: usize,
    left_hit_time: Option<f64>,
    resolved_left_hit: bool,
    resolved_right_below: bool,
    tau_violations: usize,
    pruned: usize,
}

impl<'a> Sim<'a> {
    fn exp(&mut self, rate: f64) -> f64 {
        if rate > 0.0 {
            self.r.sample::<f64, _>(Exp1) / rate
        } else {
            f64::INFINITY
        }
    }

    fn id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id - 1
    }

    fn xi(&self, d: f64) -> f64 {
        self.pot.value(self.cfg.m + d)
    }

    fn lo(&self) -> f64 {
        self.cfg.big_l - self.cfg.m
    }

    /// Draw the fate of an LC/RC subtree born at offset d at time tau.
    fn resolve_coupled(&mut self, tau: f64, d: f64) {
        let tables = self.tables.expect("reduced mode has tables");
        let s = self.cfg.t_check - tau;
        let y = self.cfg.m + d;
        let u: f64 = self.r.random();
        if u < tables.q_hit(s, y) {
            self.resolved_left_hit = true;
        }
        if u < tables.q_end(s, y) {
            self.resolved_right_below = true;
        }
    }

    fn resolve_free(&mut self, tau: f64, d: f64) {
        let tables = self.tables.expect("reduced mode has tables");
        let u: f64 = self.r.random();
        if u < tables.q_end(self.cfg.t_check - tau, self.cfg.m + d) {
            self.resolved_right_below = true;
        }
    }

    fn new_free(&mut self, d: f64, at: f64) {
        let id = self.id();
        let ring = at + self.exp(self.cfg.es);
        self.frees.push(Single { id, d, ring });
    }

    fn explicit_count(&self) -> usize {
        2 * self.mpairs.len() + 2 * self.cpairs.len() + self.frees.len() + self.bads.len()
    }

    fn step(&mut self, dt: f64, min_left: &mut f64) -> Result<()> {
        let t0 = self.t;
        let t1 = t0 + dt;
        let sd = dt.sqrt();
        let lo = self.lo();
        let full = self.cfg.mode == Mode::Full;

        // Motion.
        let old_m: Vec<f64> = self.mpairs.iter().map(|p| p.d_l).collect();
        for p in self.mpairs.iter_mut() {
            let z = sd * self.r.sample::<f64, _>(StandardNormal);
            p.d_l += z;
            p.d_r -= z;
        }
        let old_f: Vec<f64> = self.frees.iter().map(|f| f.d).collect();
        for f in self.frees.iter_mut() {
            f.d += sd * self.r.sample::<f64, _>(StandardNormal);
        }
        for i in 0..self.cpairs.len() {
            let z = sd * self.r.sample::<f64, _>(StandardNormal);
            let a = self.cpairs[i].d_l - lo;
            let p = &mut self.cpairs[i];
            p.d_l += z;
            p.d_r += z;
            let b = p.d_l - lo;
            *min_left = min_left.min(p.d_l);
            if self.left_hit_time.is_none() {
                let hit = b <= 0.0 || (a * b < 40.0 * dt && self.r.random::<f64>() < bridge_dip(a, b, dt));
                if hit {
                    self.left_hit_time = Some(t1);
                }
            }
        }
        for b in self.bads.iter_mut() {
            b.d += sd * self.r.sample::<f64, _>(StandardNormal);
            *min_left = min_left.min(b.d);
        }

        // Type changes of mirrored pairs, earliest first.
        let mut order: Vec<usize> = if self.mpairs.is_empty() { Vec::new() } else { (0..old_f.len()).collect() };
        order.sort_by(|&i, &j| old_f[i].total_cmp(&old_f[j]));
        let mut events: Vec<(f64, usize, EventKind)> = Vec::new();
        for (k, p) in self.mpairs.iter().enumerate() {
            let (y0, y1) = (old_m[k], p.d_l);
            *min_left = min_left.min(y1);
            // Hitting m (offset 0).
            if y1 >= 0.0 {
                events.push(((-y0) / (y1 - y0), k, EventKind::HitM));
            } else {
                let (a, b) = (-y0, -y1);
                if a * b < 40.0 * dt && self.r.random::<f64>() < bridge_dip(a, b, dt) {
                    events.push((a / (a + b), k, EventKind::HitM));
                }
            }
            // Hitting L.
            let (a, b) = (y0 - lo, y1 - lo);
            if b <= 0.0 {
                events.push((a / (a - b), k, EventKind::HitL));
            } else if a * b < 40.0 * dt && self.r.random::<f64>() < bridge_dip(a, b, dt) {
                events.push((a / (a + b), k, EventKind::HitL));
            }
            // Meeting free particles; the gap has variance 2 dt.
            let reach = y0.max(y1) + 10.0 * sd;
            for &j in &order {
                if old_f[j] - 10.0 * sd > reach {
                    break;
                }
                if old_f[j].min(self.frees[j].d) > reach {
                    continue;
                }
                let g0 = old_f[j] - y0;
                let g1 = self.frees[j].d - y1;
                if g0 <= 0.0 {
                    events.push((0.0, k, EventKind::Meet(j)));
                } else if g1 <= 0.0 {
                    events.push((g0 / (g0 - g1), k, EventKind::Meet(j)));
                } else if g0 * g1 < 80.0 * dt && self.r.random::<f64>() < bridge_dip(g0, g1, 2.0 * dt) {
                    events.push((g0 / (g0 + g1), k, EventKind::Meet(j)));
                }
            }
        }
        events.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut pair_done = vec![false; self.mpairs.len()];
        let mut free_taken = vec![false; self.frees.len()];
        for (theta, k, kind) in events {
            if pair_done[k] {
                continue;
            }
            if let EventKind::Meet(j) = kind {
                if free_taken[j] {
                    continue;
                }
            }
            pair_done[k] = true;
            let p = self.mpairs[k];
            let tau = t0 + theta * dt;
            let y_theta = old_m[k] + theta * (p.d_l - old_m[k]);
            match kind {
                EventKind::HitM => {
                    if full {
                        // Continue from m with the remainder of the left increment.
                        let d = (1.0 - theta) * (p.d_l - old_m[k]);
                        self.cpairs.push(CPair { id_l: p.id_l, id_r: p.id_r, d_l: d, d_r: d, ring: p.ring_a });
                    } else {
                        self.resolve_coupled(tau, 0.0);
                    }
                }
                EventKind::HitL => {
                    self.n_bad_events += 1;
                    if self.left_hit_time.is_none_or(|h| tau < h) {
                        self.left_hit_time = Some(tau);
                    }
                    *min_left = min_left.min(lo);
                    if full {
                        self.bads.push(Single { id: p.id_l, d: p.d_l.min(lo), ring: p.ring_a });
                    }
                    let ring = t1 + self.exp(self.cfg.es);
                    self.frees.push(Single { id: p.id_r, d: p.d_r, ring });
                }
                EventKind::Meet(j) => {
                    free_taken[j] = true;
                    if full {
                        let f = self.frees[j];
                        self.cpairs.push(CPair { id_l: p.id_l, id_r: f.id, d_l: p.d_l, d_r: p.d_l, ring: p.ring_a });
                    } else {
                        self.resolve_coupled(tau, y_theta);
                    }
                    let ring = t1 + self.exp(self.cfg.es);
                    self.frees.push(Single { id: p.id_r, d: p.d_r, ring });
                }
            }
        }
        if pair_done.iter().any(|&d| d) {
            let mut k = 0;
            self.mpairs.retain(|_| {
                k += 1;
                !pair_done[k - 1]
            });
        }
        if free_taken.iter().any(|&d| d) {
            let mut k = 0;
            let n_old = free_taken.len();
            self.frees.retain(|_| {
                k += 1;
                k > n_old || !free_taken[k - 1]
            });
        }

        self.branch(t1)?;

        // Ordering check between mirrored and free particles.
        if let (Some(lm), Some(fr)) =
            (self.mpairs.iter().map(|p| p.d_l).max_by(f64::total_cmp), self.frees.iter().map(|f| f.d).min_by(f64::total_cmp))
        {
            if lm > fr {
                self.tau_violations += 1;
            }
        }
        self.t = t1;
        if !full {
            if self.mpairs.is_empty() {
                let frees = std::mem::take(&mut self.frees);
                for f in frees {
                    self.resolve_free(t1, f.d);
                }
            } else if self.frees.len() > 2 * self.cfg.free_keep {
                let keep = self.cfg.free_keep;
                self.frees.select_nth_unstable_by(keep, |a, b| a.d.total_cmp(&b.d));
                let rest: Vec<Single> = self.frees.drain(keep..).collect();
                self.pruned += rest.len();
                for f in rest {
                    self.resolve_free(t1, f.d);
                }
            }
        }
        Ok(())
    }

    fn branch(&mut self, t1: f64) -> Result<()> {
        let es = self.cfg.es;
        let extra = (self.cfg.es - self.cfg.ei).max(0.0);
        let full = self.cfg.mode == Mode::Full;
        // Mirrored pairs: shared clock (rule a) and extra right clock (rule b).
        let n = self.mpairs.len();
        for k in 0..n {
            while self.mpairs[k].ring_a <= t1 {
                let p = self.mpairs[k];
                let at = p.ring_a;
                self.mpairs[k].ring_a = at + self.exp(es);
                if self.r.random::<f64>() * es < self.xi(p.d_l) {
                    let kids = self.dist.sample(&mut self.r);
                    self.mpairs[k].id_l = self.id();
                    self.mpairs[k].id_r = self.id();
                    for _ in 1..kids {
                        let (id_l, id_r) = (self.id(), self.id());
                        let (ring_a, ring_b) = (at + self.exp(es), at + self.exp(extra));
                        self.mpairs.push(MPair { id_l, id_r, d_l: p.d_l, d_r: p.d_r, ring_a, ring_b });
                    }
                }
            }
            while self.mpairs[k].ring_b <= t1 {
                let p = self.mpairs[k];
                let at = p.ring_b;
                self.mpairs[k].ring_b = at + self.exp(extra);
                let rate = self.xi(p.d_r) - self.xi(p.d_l);
                if rate < -1e-12 {
                    return Err(Error::InternalConsistency(format!("negative extra branching rate {rate} at right offset {}", p.d_r)));
                }
                if self.r.random::<f64>() * extra < rate {
                    let kids = self.dist.sample(&mut self.r);
                    self.mpairs[k].id_r = self.id();
                    for _ in 1..kids {
                        self.new_free(p.d_r, at);
                    }
                }
            }
        }
        // Free particles (rule c).
        let n = self.frees.len();
        for k in 0..n {
            while self.frees[k].ring <= t1 {
                let f = self.frees[k];
                self.frees[k].ring = f.ring + self.exp(es);
                if self.r.random::<f64>() * es < self.xi(f.d) {
                    let kids = self.dist.sample(&mut self.r);
                    self.frees[k].id = self.id();
                    for _ in 1..kids {
                        self.new_free(f.d, f.ring);
                    }
                }
            }
        }
        if full {
            let n = self.cpairs.len();
            for k in 0..n {
                while self.cpairs[k].ring <= t1 {
                    let p = self.cpairs[k];
                    self.cpairs[k].ring = p.ring + self.exp(es);
                    if self.r.random::<f64>() * es < self.xi(p.d_l) {
                        let kids = self.dist.sample(&mut self.r);
                        self.cpairs[k].id_l = self.id();
                        self.cpairs[k].id_r = self.id();
                        for _ in 1..kids {
                            let (id_l, id_r) = (self.id(), self.id());
                            let ring = p.ring + self.exp(es);
                            self.cpairs.push(CPair { id_l, id_r, d_l: p.d_l, d_r: p.d_r, ring });
                        }
                    }
                }
            }
            let n = self.bads.len();
            for k in 0..n {
                while self.bads[k].ring <= t1 {
                    let b = self.bads[k];
                    self.bads[k].ring = b.ring + self.exp(es);
                    if self.r.random::<f64>() * es < self.xi(b.d) {
                        let kids = self.dist.sample(&mut self.r);
                        self.bads[k].id = self.id();
                        for _ in 1..kids {
                            let id = self.id();
                            let ring = b.ring + self.exp(es);
                            self.bads.push(Single { id, d: b.d, ring });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn check_invariants(&self) -> Result<()> {
        let (lo, hi) = (self.lo(), self.cfg.big_r - self.cfg.m);
        for p in &self.mpairs {
            let drift = (p.d_l + p.d_r).abs();
            if drift > 1e-9 {
                return Err(Error::InternalConsistency(format!("mirror identity off by {drift}")));
            }
            if !(p.d_l > lo && p.d_l <= 0.0 && p.d_r >= 0.0 && p.d_r < hi) {
                return Err(Error::InternalConsistency(format!("mirrored pair at offsets ({}, {}) left (L, m] x [m, R)", p.d_l, p.d_r)));
            }
        }
        for p in &self.cpairs {
            if (p.d_l - p.d_r).abs() > 1e-9 {
                return Err(Error::InternalConsistency(format!("coupled pair drifted by {}", p.d_l - p.d_r)));
            }
        }
        Ok(())
    }

    fn population(&self) -> PopulationSample {
        PopulationSample {
            t: self.t,
            lm: self.mpairs.len(),
            lc: self.cpairs.len(),
            bad: self.bads.len(),
            rm: self.mpairs.len(),
            rc: self.cpairs.len(),
            free: self.frees.len(),
        }
    }

    fn min_right(&self) -> f64 {
        let m = self.cfg.m;
        self.mpairs
            .iter()
            .map(|p| p.d_r)
            .chain(self.cpairs.iter().map(|p| p.d_r))
            .chain(self.frees.iter().map(|f| f.d))
            .fold(f64::INFINITY, f64::min)
            + m
    }

    fn particles(&self) -> Vec<TypedParticle> {
        let m = self.cfg.m;
        let mut out = Vec::with_capacity(self.explicit_count());
        for p in &self.mpairs {
            out.push(TypedParticle { id: p.id_l, position: m + p.d_l, tag: Tag::Lm, partner_id: Some(p.id_r) });
            out.push(TypedParticle { id: p.id_r, position: m + p.d_r, tag: Tag::Rm, partner_id: Some(p.id_l) });
        }
        for p in &self.cpairs {
            out.push(TypedParticle { id: p.id_l, position: m + p.d_l, tag: Tag::Lc, partner_id: Some(p.id_r) });
            out.push(TypedParticle { id: p.id_r, position: m + p.d_r, tag: Tag::Rc, partner_id: Some(p.id_l) });
        }
        for f in &self.frees {
            out.push(TypedParticle { id: f.id, position: m + f.d, tag: Tag::Free, partner_id: None });
        }
        for b in &self.bads {
            out.push(TypedParticle { id: b.id, position: m + b.d, tag: Tag::Bad, partner_id: None });
        }
        out
    }
}

/// Prepared coupling: configuration, potential, offspring law and, in reduced
/// mode, the F-KPP tables shared by all replicates.
pub struct Coupler<'a> {
    pub cfg: CouplingConfig,
    pot: &'a dyn Potential,
    dist: OffspringDistribution,
    tables: Option<QTables>,
}

impl<'a> Coupler<'a> {
    pub fn new(cfg: CouplingConfig, pot: &'a dyn Potential, dist: &OffspringDistribution) -> Result<Self> {
        cfg.validate()?;
        cfg.check_potential(pot)?;
        let tables = match cfg.mode {
            Mode::Reduced => Some(QTables::build(pot, dist, &cfg)?),
            Mode::Full => None,
        };
        Ok(Self { cfg, pot, dist: dist.clone(), tables })
    }

    pub fn tables(&self) -> Option<&QTables> {
        self.tables.as_ref()
    }

    pub fn run(&self, seed: u64) -> Result<CouplingRun> {
        let cfg = &self.cfg;
        let mut sim = Sim {
            cfg,
            pot: self.pot,
            dist: &self.dist,
            tables: self.tables.as_ref(),
            r: rng::stream(seed, 0xc0),
            t: 0.0,
            next_id: 2,
            mpairs: Vec::new(),
            cpairs: Vec::new(),
            frees: Vec::new(),
            bads: Vec::new(),
            n_bad_events: 0,
            left_hit_time: None,
            resolved_left_hit: false,
            resolved_right_below: false,
            tau_violations: 0,
            pruned: 0,
        };
        let (ring_a, ring_b) = (sim.exp(cfg.es), sim.exp(cfg.es - cfg.ei));
        sim.mpairs.push(MPair { id_l: 0, id_r: 1, d_l: cfg.l - cfg.m, d_r: cfg.r - cfg.m, ring_a, ring_b });

        let steps = (cfg.t_check / cfg.dt).ceil().max(1.0) as usize;
        let dt = cfg.t_check / steps as f64;
        let sample_every = ((cfg.sample_every / dt).round() as usize).max(1);
        let mut samples = vec![TraceSample { t: 0.0, min_left: cfg.l, min_right: cfg.r }];
        let mut populations = vec![sim.population()];
        let mut n_bad_max = 0;
        let mut capped = false;
        let mut min_left = f64::INFINITY;
        for s in 1..=steps {
            sim.step(dt, &mut min_left)?;
            n_bad_max = n_bad_max.max(match cfg.mode {
                Mode::Full => sim.bads.len(),
                Mode::Reduced => sim.n_bad_events,
            });
            if sim.explicit_count() > cfg.cap {
                capped = true;
            }
            let finished = cfg.mode == Mode::Reduced && sim.mpairs.is_empty() && sim.frees.is_empty();
            if s % sample_every == 0 || s == steps || capped || finished {
                sim.check_invariants()?;
                samples.push(TraceSample { t: sim.t, min_left: min_left + cfg.m, min_right: sim.min_right() });
                populations.push(sim.population());
                min_left = f64::INFINITY;
            }
            if capped || finished {
                break;
            }
        }
        let at_end = !capped && (s_done(&sim, cfg) || cfg.mode == Mode::Reduced);
        let lm_at_end = sim.mpairs.len();
        let bad_at_end = match cfg.mode {
            Mode::Full => sim.bads.len(),
            Mode::Reduced => sim.n_bad_events,
        };
        if cfg.mode == Mode::Reduced && !capped {
            // Explicit free particles at t_check count directly.
            let lo = sim.lo();
            if sim.frees.iter().any(|f| f.d <= lo) {
                sim.resolved_right_below = true;
            }
        }
        let trace = Trace {
            big_l: cfg.big_l,
            t_end: if at_end { cfg.t_check } else { sim.t },
            samples,
            left_hit_time: sim.left_hit_time,
            resolved_left_hit: sim.resolved_left_hit,
            resolved_right_below: sim.resolved_right_below,
            lm_at_end,
            bad_at_end,
            final_particles: sim.particles(),
        };
        let (g1, g2) = check_good_events(&trace, cfg.t_check);
        let outcome = CouplingOutcome {
            g1,
            g2,
            success: !capped && lm_at_end == 0 && bad_at_end == 0,
            capped,
            n_bad_max,
            n_lm_final: lm_at_end,
            tau_violations: sim.tau_violations,
            pruned: sim.pruned,
            populations,
        };
        Ok(CouplingRun { seed, outcome, trace })
    }

    /// Replicate i runs with seed `substream(base_seed, i)`; results are in
    /// replicate order.
    pub fn run_many(&self, base_seed: u64, n: usize) -> Result<Vec<CouplingRun>> {
        (0..n).into_par_iter().map(|i| self.run(rng::substream(base_seed, i as u64))).collect()
    }
}

fn s_done(sim: &Sim<'_>, cfg: &CouplingConfig) -> bool {
    sim.t >= cfg.t_check * (1.0 - 1e-12)
}

pub fn run_coupling(cfg: &CouplingConfig, pot: &dyn Potential, dist: &OffspringDistribution, seed: u64) -> Result<CouplingRun> {
    Coupler::new(cfg.clone(), pot, dist)?.run(seed)
}

/// (G1, G2) at `t_check`: no left particle at or below L up to t_check, and
/// some right particle at or below L at t_check.
pub fn check_good_events(trace: &Trace, t_check: f64) -> (bool, bool) {
    let explicit_hit = trace.left_hit_time.is_some_and(|h| h <= t_check)
        || trace.samples.iter().any(|s| s.t <= t_check + 1e-12 && s.min_left <= trace.big_l);
    let g1 = !explicit_hit && !trace.resolved_left_hit;
    let at_check = trace.samples.iter().rev().find(|s| (s.t - t_check).abs() <= 1e-9).is_some_and(|s| s.min_right <= trace.big_l);
    let g2 = at_check || trace.resolved_right_below;
    (g1, g2)
}

/// On G1 ∧ G2 the left system must consist of coupled particles only.
pub fn subset_holds(run: &CouplingRun, t_check: f64) -> bool {
    let (g1, g2) = check_good_events(&run.trace, t_check);
    !(g1 && g2) || (run.trace.lm_at_end == 0 && run.trace.bad_at_end == 0 && run.outcome.success)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetReport {
    pub holds: bool,
    pub checked: usize,
    /// Seeds of replicates where G1 ∧ G2 held but LM or Bad particles remained.
    pub violations: Vec<u64>,
    pub rate: f64,
}

pub fn verify_subset_logic(runs: &[CouplingRun], t_check: f64) -> SubsetReport {
    let violations: Vec<u64> = runs.iter().filter(|r| !subset_holds(r, t_check)).map(|r| r.seed).collect();
    let rate = violations.len() as f64 / runs.len().max(1) as f64;
    SubsetReport { holds: violations.is_empty(), checked: runs.len(), violations, rate }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingSummary {
    pub n: usize,
    pub capped: usize,
    pub good_freq: f64,
    pub good_ci: (f64, f64),
    pub success_freq: f64,
    pub success_ci: (f64, f64),
    pub g1_freq: f64,
    pub g2_freq: f64,
    pub tau_violation_rate: f64,
    pub subset: SubsetReport,
}

pub fn summarize(runs: &[CouplingRun], t_check: f64) -> CouplingSummary {
    let n = runs.len();
    let count = |f: &dyn Fn(&CouplingRun) -> bool| runs.iter().filter(|r| f(r)).count();
    let good = count(&|r| r.outcome.g1 && r.outcome.g2);
    let success = count(&|r| r.outcome.success);
    let nf = n.max(1) as f64;
    CouplingSummary {
        n,
        capped: count(&|r| r.outcome.capped),
        good_freq: good as f64 / nf,
        good_ci: wilson_interval(good, n, 1.959964),
        success_freq: success as f64 / nf,
        success_ci: wilson_interval(success, n, 1.959964),
        g1_freq: count(&|r| r.outcome.g1) as f64 / nf,
        g2_freq: count(&|r| r.outcome.g2) as f64 / nf,
        tau_violation_rate: count(&|r| r.outcome.tau_violations > 0) as f64 / nf,
        subset: verify_subset_logic(runs, t_check),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{engineer_stretch_potential, ConstantPotential};
    use crate::stats::mean_se;

    #[test]
    fn infeasible_at_ratio_two() {
        assert!(matches!(select_parameters(1.0, 2.0, None), Err(Error::Infeasible(_))));
        assert!(matches!(select_parameters(1.0, 1.5, Some(0.01)), Err(Error::Infeasible(_))));
    }

    #[test]
    fn windows_match_closed_form() {
        let p = select_parameters(1.0, 5.0, Some(0.01)).unwrap();
        assert!((p.window.0 - 0.816).abs() < 1e-3 && (p.window.1 - 0.832).abs() < 1e-3, "{:?}", p.window);
        assert!(p.t_prime > p.window.0 && p.t_prime < p.window.1);
        assert!(p.negsup < 0.0 && p.possup > 0.0);
        let p = select_parameters(1.0, 3.0, Some(0.005)).unwrap();
        assert!((p.window.0 - 0.952).abs() < 1e-3 && (p.window.1 - 0.962).abs() < 1e-3, "{:?}", p.window);
        assert!(p.window.1 < 1.0 - 5.0 * 0.005);
    }

    #[test]
    fn free_delta_respects_constraints() {
        for es in [3.0, 5.0, 8.0] {
            let p = select_parameters(1.0, es, None).unwrap();
            assert!(p.t_prime < 1.0 - 5.0 * p.delta1);
            assert!(p.negsup < 0.0 && p.possup > 0.0);
            assert!(p.delta2 > 0.0);
            let a2 = (es * (1.0 - p.delta2) - 1.0) / 1.0;
            assert!(sup_ab(p.t_prime, a2, p.b2).0 > 0.0);
        }
    }

    #[test]
    fn sup_ab_matches_brute_force() {
        for &(t, a, b) in &[(0.8, 4.0, 1.08), (0.3, 2.0, 1.02), (0.95, 1.5, 1.1)] {
            let brute = (0..=100_000)
                .map(|i| {
                    let s = t * i as f64 / 100_001.0;
                    t + a * s - b / (t - s)
                })
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((sup_ab(t, a, b).0 - brute).abs() < 1e-6);
        }
    }

    fn constant_config(mode: Mode, t_check: f64) -> CouplingConfig {
        let mut c = CouplingConfig::with_geometry(1.0, 1.0, 0.0, 10.0, 0.05, -2.0, 1.0, t_check).unwrap();
        c.mode = mode;
        c.dt = 0.01;
        c
    }

    #[test]
    fn initial_state_is_one_mirrored_pair() {
        let pot = ConstantPotential::new(1.0);
        let mut cfg = constant_config(Mode::Full, 1e-9);
        cfg.dt = 1.0;
        let c = Coupler::new(cfg.clone(), &pot, &OffspringDistribution::binary()).unwrap();
        let run = c.run(1).unwrap();
        assert_eq!(run.outcome.populations[0], PopulationSample { t: 0.0, lm: 1, lc: 0, bad: 0, rm: 1, rc: 0, free: 0 });
        assert_eq!(run.trace.samples[0].min_left, cfg.l);
        assert!((cfg.m - cfg.l - (cfg.r - cfg.m)).abs() < 1e-15);
    }

    #[test]
    fn full_mode_invariants_and_marginals() {
        let pot = ConstantPotential::new(1.0);
        let cfg = constant_config(Mode::Full, 2.0);
        let m = cfg.m;
        let c = Coupler::new(cfg, &pot, &OffspringDistribution::binary()).unwrap();
        let runs = c.run_many(9, 4000).unwrap();
        let mut left = Vec::new();
        let mut right = Vec::new();
        for run in &runs {
            let p = run.outcome.populations.last().unwrap();
            assert_eq!(p.lm, p.rm);
            assert_eq!(p.lc, p.rc);
            left.push((p.lm + p.lc + p.bad) as f64);
            right.push((p.rm + p.rc + p.free) as f64);
            let ids: std::collections::HashMap<u64, &TypedParticle> = run.trace.final_particles.iter().map(|q| (q.id, q)).collect();
            assert_eq!(ids.len(), run.trace.final_particles.len());
            for q in &run.trace.final_particles {
                if let Some(pid) = q.partner_id {
                    let partner = ids[&pid];
                    assert_eq!(partner.partner_id, Some(q.id));
                    match q.tag {
                        Tag::Lc => assert_eq!(partner.position, q.position),
                        Tag::Lm => assert!(((m - q.position) - (partner.position - m)).abs() < 1e-12),
                        _ => {}
                    }
                }
            }
        }
        let e2 = 2.0f64.exp();
        let (ml, sl) = mean_se(&left);
        let (mr, sr) = mean_se(&right);
        assert!((ml - e2).abs() < 3.0 * sl, "{ml} +- {sl}");
        assert!((mr - e2).abs() < 3.0 * sr, "{mr} +- {sr}");
    }

    #[test]
    fn good_event_checks_on_synthetic_traces() {
        let base = Trace {
            big_l: 0.0,
            t_end: 1.0,
            samples: vec![TraceSample { t: 0.0, min_left: 1.0, min_right: 2.0 }, TraceSample { t: 1.0, min_left: 0.5, min_right: -0.1 }],
            left_hit_time: None,
            resolved_left_hit: false,
            resolved_right_below: false,
            lm_at_end: 0,
            bad_at_end: 0,
            final_particles: vec![],
        };
        assert_eq!(check_good_events(&base, 1.0), (true, true));
        let mut t = base.clone();
        t.samples[1].min_left = -0.01;
        assert!(!check_good_events(&t, 1.0).0);
        let mut t = base.clone();
        t.samples[1].min_right = 0.3;
        assert!(!check_good_events(&t, 1.0).1);
    }

    #[test]
    fn reduced_mode_matches_marginal_oracles() {
        let (ei, es, lam) = (1.0, 3.0, 6.0);
        let x_n = 0.0;
        let pot = engineer_stretch_potential(ei, es, lam, x_n, (-40.0, 60.0)).unwrap();
        let params = select_parameters(ei, es, None).unwrap();
        let mut cfg = CouplingConfig::new(ei, es, x_n, lam, &params).unwrap();
        cfg.dt = 2e-3;
        let c = Coupler::new(cfg.clone(), &pot, &OffspringDistribution::binary()).unwrap();
        let runs = c.run_many(3, 1500).unwrap();
        let s = summarize(&runs, cfg.t_check);
        let q = c.tables().unwrap();
        let g1 = 1.0 - q.q_hit(cfg.t_check, cfg.l);
        let g2 = q.q_end(cfg.t_check, cfg.r);
        let se = |p: f64| (p * (1.0 - p) / 1500.0).sqrt().max(1e-3);
        assert!((s.g1_freq - g1).abs() < 4.0 * se(g1) + 0.01, "G1 {} vs {g1}", s.g1_freq);
        assert!((s.g2_freq - g2).abs() < 4.0 * se(g2) + 0.01, "G2 {} vs {g2}", s.g2_freq);
        assert_eq!(s.capped, 0);
    }
}
