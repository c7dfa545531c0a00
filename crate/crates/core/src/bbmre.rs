//! Branching Brownian motion in a random environment.
//!
//! Every particle carries an exponential proposal clock of rate es; a ring at
//! position y is accepted with probability ξ(y)/es. Motion is advanced with
//! exact Gaussian increments between grid times and ring times.

use rand::Rng as _;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;

use crate::branching_law::OffspringDistribution;
use crate::environment::Potential;
use crate::error::{config, Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub id: u64,
    pub position: f64,
    pub parent: Option<u64>,
    pub birth_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenealogyRecord {
    pub id: u64,
    pub parent: Option<u64>,
    pub birth_time: f64,
    /// Time the particle branched, if it did.
    pub death_time: Option<f64>,
    /// Position at death, or at the final time for survivors.
    pub final_position: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BbmOutcome {
    /// Alive particles at the stopping time; slot 0 always continues the
    /// lineage of the initial particle.
    pub particles: Vec<Particle>,
    pub time: f64,
    pub capped: bool,
    pub genealogy: Option<Vec<GenealogyRecord>>,
}

impl BbmOutcome {
    pub fn positions(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.position).collect()
    }

    pub fn genealogy_csv(&self) -> Option<String> {
        let g = self.genealogy.as_ref()?;
        let mut s = String::from("id,parent,birth_time,final_position\n");
        for r in g {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.id,
                r.parent.map_or(String::new(), |p| p.to_string()),
                crate::fmt_float(r.birth_time),
                crate::fmt_float(r.final_position)
            ));
        }
        Some(s)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BbmConfig {
    pub dt: f64,
    pub cap: usize,
    pub genealogy: bool,
}

impl Default for BbmConfig {
    fn default() -> Self {
        Self { dt: 1e-3, cap: 1_000_000, genealogy: false }
    }
}

struct Live {
    p: Particle,
    next_ring: f64,
    local_time: f64,
}

pub fn simulate(
    pot: &dyn Potential,
    x0: f64,
    t_end: f64,
    dist: &OffspringDistribution,
    cfg: &BbmConfig,
    r: &mut Rng,
) -> Result<BbmOutcome> {
    if !(t_end >= 0.0) || cfg.cap < 1 || !(cfg.dt > 0.0) {
        return config(format!("need t_end >= 0, cap >= 1 and dt > 0 (t_end = {t_end}, cap = {}, dt = {})", cfg.cap, cfg.dt));
    }
    let es = pot.es();
    if !(es > 0.0) {
        return config("branching needs es > 0");
    }
    let (lo, hi) = pot.domain();
    let exp = |r: &mut Rng| -> f64 { r.sample::<f64, _>(Exp1) / es };
    let mut next_id = 1u64;
    let mut log: Vec<GenealogyRecord> = Vec::new();
    let mut live = vec![Live { p: Particle { id: 0, position: x0, parent: None, birth_time: 0.0 }, next_ring: exp(r), local_time: 0.0 }];
    let steps = if t_end == 0.0 { 0 } else { (t_end / cfg.dt).ceil() as usize };
    let mut capped = false;
    let mut now = 0.0;
    'outer: for s in 1..=steps {
        let t1 = if s == steps { t_end } else { s as f64 * cfg.dt };
        let mut i = 0;
        while i < live.len() {
            while live[i].next_ring < t1 {
                let tau = live[i].next_ring;
                let l = &mut live[i];
                l.p.position += (tau - l.local_time).sqrt() * r.sample::<f64, _>(StandardNormal);
                l.local_time = tau;
                let y = l.p.position;
                if y < lo || y > hi {
                    return Err(Error::Domain(format!("particle left the potential window at {y}")));
                }
                if r.random::<f64>() * es < pot.value(y) {
                    let k = dist.sample(r);
                    let parent = l.p.id;
                    if cfg.genealogy {
                        log.push(GenealogyRecord {
                            id: parent,
                            parent: l.p.parent,
                            birth_time: l.p.birth_time,
                            death_time: Some(tau),
                            final_position: y,
                        });
                    }
                    l.p = Particle { id: next_id, position: y, parent: Some(parent), birth_time: tau };
                    l.next_ring = tau + exp(r);
                    next_id += 1;
                    for _ in 1..k {
                        let child = Particle { id: next_id, position: y, parent: Some(parent), birth_time: tau };
                        next_id += 1;
                        let ring = tau + exp(r);
                        live.push(Live { p: child, next_ring: ring, local_time: tau });
                    }
                    if live.len() > cfg.cap {
                        capped = true;
                        now = tau;
                        break 'outer;
                    }
                } else {
                    live[i].next_ring = tau + exp(r);
                }
            }
            let l = &mut live[i];
            l.p.position += (t1 - l.local_time).sqrt() * r.sample::<f64, _>(StandardNormal);
            l.local_time = t1;
            i += 1;
        }
        now = t1;
    }
    let genealogy = cfg.genealogy.then(|| {
        log.extend(live.iter().map(|l| GenealogyRecord {
            id: l.p.id,
            parent: l.p.parent,
            birth_time: l.p.birth_time,
            death_time: None,
            final_position: l.p.position,
        }));
        log
    });
    Ok(BbmOutcome { particles: live.into_iter().map(|l| l.p).collect(), time: now, capped, genealogy })
}

/// Particles with position in the closed interval [a, b].
pub fn count_interval(positions: &[f64], interval: (f64, f64)) -> usize {
    positions.iter().filter(|&&y| y >= interval.0 && y <= interval.1).count()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    AtOrBelow(f64),
    AtOrAbove(f64),
}

impl Target {
    fn hit(self, positions: &[f64]) -> bool {
        match self {
            Self::AtOrBelow(y) => positions.iter().any(|&p| p <= y),
            Self::AtOrAbove(y) => positions.iter().any(|&p| p >= y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WEstimate {
    pub w_hat: f64,
    pub se: f64,
    pub n_reps: usize,
    pub indeterminate_frac: f64,
    /// Bounds treating every capped replicate as a miss resp. a hit.
    pub lower: f64,
    pub upper: f64,
}

/// Fraction of replicates started at `x` with some particle in the target set
/// at time t. Replicate i uses stream i, so calls with equal seeds share
/// common random numbers.
#[allow(clippy::too_many_arguments)]
pub fn estimate_w(
    pot: &dyn Potential,
    x: f64,
    t: f64,
    target: Target,
    dist: &OffspringDistribution,
    n_reps: usize,
    cfg: &BbmConfig,
    seed: u64,
) -> Result<WEstimate> {
    if n_reps == 0 {
        return config("n_reps must be positive");
    }
    let results: Vec<Result<Option<bool>>> = (0..n_reps)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, rng::substream(0xbb, i as u64));
            let out = simulate(pot, x, t, dist, cfg, &mut r)?;
            Ok((!out.capped).then(|| target.hit(&out.positions())))
        })
        .collect();
    let (mut hits, mut det, mut capped) = (0usize, 0usize, 0usize);
    for r in results {
        match r? {
            Some(h) => {
                det += 1;
                hits += h as usize;
            }
            None => capped += 1,
        }
    }
    let indeterminate_frac = capped as f64 / n_reps as f64;
    if indeterminate_frac > 0.2 {
        return Err(Error::Unreliable(format!(
            "{:.0}% of replicates hit the population cap; use a smaller t or a larger cap",
            100.0 * indeterminate_frac
        )));
    }
    let w_hat = if det > 0 { hits as f64 / det as f64 } else { f64::NAN };
    let se = (w_hat * (1.0 - w_hat) / det.max(1) as f64).sqrt();
    Ok(WEstimate {
        w_hat,
        se,
        n_reps,
        indeterminate_frac,
        lower: hits as f64 / n_reps as f64,
        upper: (hits + capped) as f64 / n_reps as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{ConstantPotential, FnPotential};
    use crate::stats::{ks_two_sample, mean_se};

    #[test]
    fn zero_time_is_initial_particle() {
        let out = simulate(
            &ConstantPotential::new(1.0),
            1.5,
            0.0,
            &OffspringDistribution::binary(),
            &BbmConfig::default(),
            &mut rng::stream(1, 0),
        )
        .unwrap();
        assert_eq!(out.positions(), vec![1.5]);
        let w = estimate_w(
            &ConstantPotential::new(1.0),
            0.0,
            0.0,
            Target::AtOrBelow(0.0),
            &OffspringDistribution::binary(),
            10,
            &BbmConfig::default(),
            1,
        )
        .unwrap();
        assert_eq!(w.w_hat, 1.0);
        let w = estimate_w(
            &ConstantPotential::new(1.0),
            0.1,
            0.0,
            Target::AtOrBelow(0.0),
            &OffspringDistribution::binary(),
            10,
            &BbmConfig::default(),
            1,
        )
        .unwrap();
        assert_eq!(w.w_hat, 0.0);
    }

    #[test]
    fn yule_mean_population() {
        let pot = ConstantPotential::new(1.0);
        let d = OffspringDistribution::binary();
        let cfg = BbmConfig { dt: 0.05, ..Default::default() };
        let sizes: Vec<f64> =
            (0..10_000).map(|i| simulate(&pot, 0.0, 2.0, &d, &cfg, &mut rng::stream(3, i)).unwrap().particles.len() as f64).collect();
        let (m, se) = mean_se(&sizes);
        let exact = 2.0f64.exp();
        assert!((m - exact).abs() <= 3.0 * se, "{m} +- {se}");
    }

    #[test]
    fn thinned_branch_times_are_exponential() {
        let c = 1.5;
        let pot = FnPotential::new(c, 2.0 * c, move |_| c);
        let d = OffspringDistribution::binary();
        let cfg = BbmConfig { dt: 0.5, cap: 10, genealogy: true };
        let mut times = Vec::new();
        let mut r = rng::stream(4, 0);
        for _ in 0..10_000 {
            let out = simulate(&pot, 0.0, 30.0 / c, &d, &cfg, &mut r);
            let g = out.unwrap().genealogy.unwrap();
            times.push(g.iter().find(|g| g.id == 0).unwrap().death_time.unwrap());
        }
        let mut r = rng::stream(5, 0);
        let reference: Vec<f64> = (0..10_000).map(|_| r.sample::<f64, _>(Exp1) / c).collect();
        let (_, p) = ks_two_sample(&times, &reference);
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn tagged_lineage_is_brownian() {
        let pot = ConstantPotential::new(1.0);
        let d = OffspringDistribution::binary();
        let cfg = BbmConfig { dt: 0.1, ..Default::default() };
        let t = 1.5;
        let xs: Vec<f64> =
            (0..10_000).map(|i| simulate(&pot, 0.0, t, &d, &cfg, &mut rng::stream(6, i)).unwrap().particles[0].position).collect();
        let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let (v, se) = mean_se(&sq);
        assert!((v - t).abs() <= 3.0 * se, "{v} +- {se}");
    }

    #[test]
    fn count_interval_basics() {
        let p = [0.0, 1.0, 2.0, 2.5];
        assert_eq!(count_interval(&p, (3.0, 2.0)), 0);
        assert_eq!(count_interval(&p, (f64::NEG_INFINITY, f64::INFINITY)), 4);
        assert_eq!(count_interval(&p, (1.0, 2.0)), 2);
    }

    #[test]
    fn capped_runs_are_flagged() {
        let pot = ConstantPotential::new(3.0);
        let d = OffspringDistribution::binary();
        let cfg = BbmConfig { dt: 0.1, cap: 50, genealogy: false };
        let out = simulate(&pot, 0.0, 5.0, &d, &cfg, &mut rng::stream(1, 1)).unwrap();
        assert!(out.capped);
        let e = estimate_w(&pot, 0.0, 5.0, Target::AtOrBelow(0.0), &d, 20, &cfg, 1);
        assert!(matches!(e, Err(Error::Unreliable(_))));
    }
}
