//! Random potentials: Poisson bump fields, lattice adapters, engineered
//! stretches and the stretch finder.

use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Poisson};

use crate::error::{config, Error, Result};
use crate::rng;

/// A bounded potential on the line.
///
/// `value` does no domain checking; callers that may wander use
/// [`Potential::domain`] to guard themselves.
pub trait Potential: Send + Sync {
    fn value(&self, x: f64) -> f64;
    fn ei(&self) -> f64;
    fn es(&self) -> f64;
    fn domain(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }
}

impl<P: Potential + ?Sized> Potential for Arc<P> {
    fn value(&self, x: f64) -> f64 {
        (**self).value(x)
    }
    fn ei(&self) -> f64 {
        (**self).ei()
    }
    fn es(&self) -> f64 {
        (**self).es()
    }
    fn domain(&self) -> (f64, f64) {
        (**self).domain()
    }
}

impl<P: Potential + ?Sized> Potential for &P {
    fn value(&self, x: f64) -> f64 {
        (**self).value(x)
    }
    fn ei(&self) -> f64 {
        (**self).ei()
    }
    fn es(&self) -> f64 {
        (**self).es()
    }
    fn domain(&self) -> (f64, f64) {
        (**self).domain()
    }
}

pub fn check_domain(pot: &dyn Potential, lo: f64, hi: f64) -> Result<()> {
    let (a, b) = pot.domain();
    if lo < a || hi > b {
        return Err(Error::Domain(format!("range [{lo}, {hi}] is not inside the potential window [{a}, {b}]")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantPotential {
    pub c: f64,
}

impl ConstantPotential {
    pub fn new(c: f64) -> Self {
        Self { c }
    }
}

impl Potential for ConstantPotential {
    fn value(&self, _x: f64) -> f64 {
        self.c
    }
    fn ei(&self) -> f64 {
        self.c
    }
    fn es(&self) -> f64 {
        self.c
    }
}

/// Potential given by a closure together with declared bounds.
pub struct FnPotential<F> {
    f: F,
    ei: f64,
    es: f64,
}

impl<F: Fn(f64) -> f64 + Send + Sync> FnPotential<F> {
    pub fn new(ei: f64, es: f64, f: F) -> Self {
        Self { f, ei, es }
    }
}

impl<F: Fn(f64) -> f64 + Send + Sync> Potential for FnPotential<F> {
    fn value(&self, x: f64) -> f64 {
        (self.f)(x)
    }
    fn ei(&self) -> f64 {
        self.ei
    }
    fn es(&self) -> f64 {
        self.es
    }
}

/// `factor * base`.
#[derive(Clone)]
pub struct ScaledPotential<P> {
    pub base: P,
    pub factor: f64,
}

impl<P: Potential> ScaledPotential<P> {
    pub fn new(base: P, factor: f64) -> Self {
        Self { base, factor }
    }
}

impl<P: Potential> Potential for ScaledPotential<P> {
    fn value(&self, x: f64) -> f64 {
        self.factor * self.base.value(x)
    }
    fn ei(&self) -> f64 {
        self.factor * self.base.ei()
    }
    fn es(&self) -> f64 {
        self.factor * self.base.es()
    }
    fn domain(&self) -> (f64, f64) {
        self.base.domain()
    }
}

/// Piecewise-linear bump profile χ.
#[derive(Debug, Clone, PartialEq)]
pub struct BumpProfile {
    breakpoints: Vec<(f64, f64)>,
    max_slope: f64,
}

impl Default for BumpProfile {
    /// χ(x) = ((3 − 2x) ∧ 1) ∨ 0.
    fn default() -> Self {
        Self::new(vec![(1.0, 1.0), (1.5, 0.0)]).expect("default profile is valid")
    }
}

impl BumpProfile {
    /// Values are constant before the first and after the last breakpoint.
    pub fn new(breakpoints: Vec<(f64, f64)>) -> Result<Self> {
        if breakpoints.is_empty() {
            return config("bump profile needs at least one breakpoint");
        }
        for w in breakpoints.windows(2) {
            if w[1].0 <= w[0].0 {
                return config("bump profile abscissae must be strictly increasing");
            }
            if w[1].1 > w[0].1 {
                return config("bump profile must be non-increasing");
            }
        }
        if breakpoints.iter().any(|&(a, v)| a < 0.0 || !(0.0..=1.0).contains(&v)) {
            return config("bump profile needs abscissae >= 0 and values in [0, 1]");
        }
        let mut p = Self { breakpoints, max_slope: 0.0 };
        if p.eval(1.0) != 1.0 {
            return config("bump profile must equal 1 on [0, 1]");
        }
        if p.eval(2.0) != 0.0 || p.breakpoints.last().unwrap().1 != 0.0 {
            return config("bump profile must vanish on [2, inf)");
        }
        p.max_slope = p.breakpoints.windows(2).map(|w| (w[0].1 - w[1].1) / (w[1].0 - w[0].0)).fold(0.0, f64::max);
        Ok(p)
    }

    pub fn breakpoints(&self) -> &[(f64, f64)] {
        &self.breakpoints
    }

    pub fn max_slope(&self) -> f64 {
        self.max_slope
    }

    pub fn eval(&self, d: f64) -> f64 {
        let bp = &self.breakpoints;
        if d <= bp[0].0 {
            return bp[0].1;
        }
        for w in bp.windows(2) {
            let ((a0, v0), (a1, v1)) = (w[0], w[1]);
            if d <= a1 {
                return v0 + (v1 - v0) * (d - a0) / (a1 - a0);
            }
        }
        bp[bp.len() - 1].1
    }

    /// Distance beyond which χ vanishes.
    pub fn support(&self) -> f64 {
        self.breakpoints.iter().find(|&&(_, v)| v == 0.0).map_or(2.0, |&(a, _)| a)
    }
}

pub fn sample_poisson_points(intensity: f64, window: (f64, f64), seed: u64) -> Result<Vec<f64>> {
    let (a, b) = window;
    if !(a < b) {
        return config(format!("invalid window [{a}, {b}]"));
    }
    if intensity < 0.0 || !intensity.is_finite() {
        return config(format!("intensity must be finite and >= 0, got {intensity}"));
    }
    if intensity == 0.0 {
        return Ok(Vec::new());
    }
    let (lo, hi) = (a - 2.0, b + 2.0);
    let mut rng = rng::stream(seed, 0x0e1f);
    let mean = intensity * (hi - lo);
    let count = Poisson::new(mean).map_err(|e| Error::Config(format!("poisson mean {mean}: {e}")))?.sample(&mut rng) as usize;
    let mut pts: Vec<f64> = (0..count).map(|_| rng.random_range(lo..hi)).collect();
    pts.sort_by(|x, y| x.total_cmp(y));
    Ok(pts)
}

/// ξ(x) = ei + (es − ei) · max_i χ(|x − ω_i|) on a window.
#[derive(Debug, Clone)]
pub struct PoissonBumpPotential {
    ei: f64,
    es: f64,
    intensity: f64,
    points: Vec<f64>,
    profile: BumpProfile,
    window: (f64, f64),
}

impl PoissonBumpPotential {
    pub fn sample(ei: f64, es: f64, intensity: f64, profile: BumpProfile, window: (f64, f64), seed: u64) -> Result<Self> {
        let points = sample_poisson_points(intensity, window, seed)?;
        Self::from_points(ei, es, intensity, points, profile, window)
    }

    pub fn from_points(ei: f64, es: f64, intensity: f64, mut points: Vec<f64>, profile: BumpProfile, window: (f64, f64)) -> Result<Self> {
        if !(ei > 0.0 && es > ei && es.is_finite()) {
            return config(format!("need 0 < ei < es, got ei = {ei}, es = {es}"));
        }
        if !(window.0 < window.1) {
            return config(format!("invalid window [{}, {}]", window.0, window.1));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return config("non-finite point location");
        }
        points.sort_by(|x, y| x.total_cmp(y));
        Ok(Self { ei, es, intensity, points, profile, window })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn profile(&self) -> &BumpProfile {
        &self.profile
    }

    pub fn intensity(&self) -> f64 {
        self.intensity
    }

    pub fn window(&self) -> (f64, f64) {
        self.window
    }

    pub fn lipschitz(&self) -> f64 {
        (self.es - self.ei) * self.profile.max_slope()
    }

    pub fn evaluate(&self, x: f64) -> Result<f64> {
        if !(self.window.0..=self.window.1).contains(&x) {
            return Err(Error::Domain(format!("x = {x} outside window [{}, {}]", self.window.0, self.window.1)));
        }
        Ok(self.raw(x))
    }

    fn raw(&self, x: f64) -> f64 {
        let reach = self.profile.support();
        let start = self.points.partition_point(|&p| p < x - reach);
        let mut best: f64 = 0.0;
        for &p in &self.points[start..] {
            if p >= x + reach {
                break;
            }
            best = best.max(self.profile.eval((x - p).abs()));
            if best >= 1.0 {
                break;
            }
        }
        self.ei + (self.es - self.ei) * best
    }
}

impl Potential for PoissonBumpPotential {
    fn value(&self, x: f64) -> f64 {
        self.raw(x)
    }
    fn ei(&self) -> f64 {
        self.ei
    }
    fn es(&self) -> f64 {
        self.es
    }
    fn domain(&self) -> (f64, f64) {
        self.window
    }
}

/// Samples of a potential on `origin + k dx`, linearly interpolated between nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticePotential {
    pub origin: f64,
    pub dx: f64,
    pub values: Vec<f64>,
    ei: f64,
    es: f64,
}

impl LatticePotential {
    pub fn new(origin: f64, dx: f64, values: Vec<f64>, ei: f64, es: f64) -> Result<Self> {
        if !(dx > 0.0) {
            return config(format!("lattice spacing must be positive, got {dx}"));
        }
        if values.len() < 3 {
            return config("lattice potential needs at least 3 nodes");
        }
        if values.iter().any(|&v| !(v >= ei && v <= es)) {
            return config(format!("lattice values must lie in [{ei}, {es}]"));
        }
        Ok(Self { origin, dx, values, ei, es })
    }

    pub fn x(&self, k: usize) -> f64 {
        self.origin + k as f64 * self.dx
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,xi\n");
        for (k, v) in self.values.iter().enumerate() {
            s.push_str(&format!("{:.16e},{:.16e}\n", self.x(k), v));
        }
        s
    }
}

impl Potential for LatticePotential {
    fn value(&self, x: f64) -> f64 {
        let s = ((x - self.origin) / self.dx).clamp(0.0, (self.values.len() - 1) as f64);
        let k = (s.floor() as usize).min(self.values.len() - 2);
        let f = s - k as f64;
        self.values[k] * (1.0 - f) + self.values[k + 1] * f
    }
    fn ei(&self) -> f64 {
        self.ei
    }
    fn es(&self) -> f64 {
        self.es
    }
    fn domain(&self) -> (f64, f64) {
        (self.origin, self.x(self.values.len() - 1))
    }
}

pub fn discretize(pot: &dyn Potential, dx: f64, window: (f64, f64)) -> Result<LatticePotential> {
    if !(dx > 0.0) {
        return config(format!("dx must be positive, got {dx}"));
    }
    let (a, b) = window;
    if !(a < b) {
        return config(format!("invalid window [{a}, {b}]"));
    }
    check_domain(pot, a, b)?;
    let n = ((b - a) / dx + 1e-9).floor() as usize + 1;
    let values = (0..n).map(|k| pot.value(a + k as f64 * dx)).collect();
    LatticePotential::new(a, dx, values, pot.ei(), pot.es())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StretchReport {
    pub n: u64,
    pub x_n: f64,
    pub c0: f64,
    pub low_interval: (f64, f64),
    pub high_interval: (f64, f64),
    pub monotone_ok: bool,
}

/// Grid spacing of the stretch scan; a power of two so integer centres are nodes.
pub const STRETCH_DX: f64 = 1.0 / 32.0;
const STRETCH_TOL: f64 = 1e-12;

/// Leftmost x in [n, 2n] with ξ = ei on [x − 2φ, x], ξ = es on [x + 2, x + 2φ − 2]
/// and ξ non-decreasing on [x − 2φ, x + 2φ − 2], where φ = c0 ln n.
pub fn find_stretches(pot: &dyn Potential, c0: f64, n_range: (u64, u64)) -> Result<Vec<StretchReport>> {
    let (n_min, n_max) = n_range;
    if !(c0 > 0.0) || n_min < 2 || n_min > n_max {
        return config(format!("need c0 > 0 and 2 <= n_min <= n_max, got c0 = {c0}, n = {n_range:?}"));
    }
    let phi_max = c0 * (n_max as f64).ln();
    let phi_min = c0 * (n_min as f64).ln();
    let lo = n_min as f64 - 2.0 * phi_max.max(phi_min);
    let hi = 2.0 * n_max as f64 + 2.0 * phi_max;
    check_domain(pot, lo, hi)?;

    let dx = STRETCH_DX;
    let k0 = (lo / dx).floor() as i64;
    let k1 = (hi / dx).ceil() as i64;
    let xs: Vec<f64> = (k0..=k1).map(|k| k as f64 * dx).collect();
    let vals: Vec<f64> = xs.iter().map(|&x| pot.value(x)).collect();
    let (ei, es) = (pot.ei(), pot.es());
    let prefix = |bad: &dyn Fn(usize) -> bool, len: usize| {
        let mut p = vec![0u32; len + 1];
        for i in 0..len {
            p[i + 1] = p[i] + bad(i) as u32;
        }
        p
    };
    let m = vals.len();
    let not_ei = prefix(&|i| (vals[i] - ei).abs() > STRETCH_TOL, m);
    let not_es = prefix(&|i| (vals[i] - es).abs() > STRETCH_TOL, m);
    let drops = prefix(&|i| i + 1 < m && vals[i + 1] < vals[i] - STRETCH_TOL, m);
    let idx_ceil = |x: f64| ((x / dx - 1e-9).ceil() as i64 - k0).clamp(0, m as i64) as usize;
    let idx_floor = |x: f64| ((x / dx + 1e-9).floor() as i64 - k0).clamp(-1, m as i64 - 1);
    let count = |p: &[u32], a: usize, b: i64| if b < a as i64 { 0 } else { p[b as usize + 1] - p[a] };

    let mut reports = Vec::new();
    for n in n_min..=n_max {
        let phi = c0 * (n as f64).ln();
        let start = idx_ceil(n as f64);
        let end = idx_floor(2.0 * n as f64);
        let mut i = start as i64;
        while i <= end {
            let x = xs[i as usize];
            let ok_low = count(&not_ei, idx_ceil(x - 2.0 * phi), idx_floor(x)) == 0;
            let ok_high = count(&not_es, idx_ceil(x + 2.0), idx_floor(x + 2.0 * phi - 2.0)) == 0;
            let a = idx_ceil(x - 2.0 * phi);
            let b = idx_floor(x + 2.0 * phi - 2.0);
            // pairs (j, j+1) with both nodes inside [a, b]
            let ok_mono = count(&drops, a, b - 1) == 0;
            if ok_low && ok_high && ok_mono {
                let monotone_ok = monotone_scan(pot, x - 2.0 * phi, x + 2.0 * phi - 2.0, dx / 4.0);
                reports.push(StretchReport {
                    n,
                    x_n: x,
                    c0,
                    low_interval: (x - 2.0 * phi, x),
                    high_interval: (x + 2.0, x + 2.0 * phi - 2.0),
                    monotone_ok,
                });
                break;
            }
            i += 1;
        }
    }
    Ok(reports)
}

fn monotone_scan(pot: &dyn Potential, a: f64, b: f64, h: f64) -> bool {
    let steps = ((b - a) / h).ceil().max(1.0) as usize;
    let mut prev = pot.value(a);
    for j in 1..=steps {
        let v = pot.value((a + j as f64 * h).min(b));
        if v < prev - STRETCH_TOL {
            return false;
        }
        prev = v;
    }
    true
}

/// Deterministic bump configuration with ξ = ei on [center − 2Λ, center],
/// ξ = es on [center + 2, center + 2Λ − 2] and no other points.
pub fn engineer_stretch_potential(ei: f64, es: f64, half_length: f64, center: f64, window: (f64, f64)) -> Result<PoissonBumpPotential> {
    let lam = half_length;
    if !(lam > 2.0) {
        return config(format!("stretch half-length must exceed 2, got {lam}"));
    }
    if window.0 > center - 2.0 * lam - 2.0 || window.1 < center + 2.0 * lam + 2.0 {
        return config(format!(
            "window [{}, {}] must contain [{}, {}]",
            window.0,
            window.1,
            center - 2.0 * lam - 2.0,
            center + 2.0 * lam + 2.0
        ));
    }
    // Default χ gives es within distance 1 and ei beyond 1.5 of a point, so
    // points 2 apart from center + 3 keep the block saturated.
    let profile = BumpProfile::default();
    let mut points = vec![center + 3.0];
    while *points.last().unwrap() < center + 2.0 * lam - 3.0 {
        let next = points.last().unwrap() + 2.0;
        points.push(next);
    }
    PoissonBumpPotential::from_points(ei, es, 1.0, points, profile, window)
}
