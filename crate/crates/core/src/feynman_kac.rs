//! Path estimators for PAM, Brownian hitting functionals, and the
//! Lyapunov exponent / front speed from the finite-difference log-field.

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::branching_law::Nonlinearity;
use crate::environment::{check_domain, Potential};
use crate::error::{config, Error, Result};
use crate::pde_solver::{solve_with, FieldKind, InitialCondition, SolverConfig, WindowPolicy};
use crate::rng::{self, Rng};

/// Paths per independent random stream.
pub const PATH_BLOCK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathEstimate {
    pub value: f64,
    pub standard_error: f64,
    pub n_paths: usize,
    pub dt: f64,
}

/// Run `n` path simulations in blocks with per-block streams, reducing the
/// per-block partial sums in block order.
pub(crate) fn blocked_sums<F>(n: usize, seed: u64, stream_tag: u64, width: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Rng, &mut [f64]) -> Result<()> + Sync,
{
    let blocks = n.div_ceil(PATH_BLOCK);
    let partial: Vec<Result<Vec<f64>>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(seed, rng::substream(stream_tag, b as u64));
            let count = PATH_BLOCK.min(n - b * PATH_BLOCK);
            let mut acc = vec![0.0; width];
            let mut row = vec![0.0; width];
            for _ in 0..count {
                f(&mut r, &mut row)?;
                for (a, v) in acc.iter_mut().zip(&row) {
                    *a += v;
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = vec![0.0; width];
    for p in partial {
        for (t, v) in total.iter_mut().zip(p?) {
            *t += v;
        }
    }
    Ok(total)
}

/// u(t, x) = E_x[exp(∫_0^t ξ(B_s) ds) u0(B_t)] by direct simulation.
pub fn estimate_u_mc(
    pot: &dyn Potential,
    t: f64,
    x: f64,
    u0: &InitialCondition,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<PathEstimate> {
    if !(t > 0.0) || !(dt > 0.0 && dt <= 1e-2) || n_paths < 2 {
        return config(format!("need t > 0, 0 < dt <= 0.01 and n_paths >= 2 (t = {t}, dt = {dt}, n = {n_paths})"));
    }
    let steps = (t / dt).ceil() as usize;
    let h = t / steps as f64;
    let sd = h.sqrt();
    let (lo, hi) = pot.domain();
    let sums = blocked_sums(n_paths, seed, 0xfeed, 2, |r, row| {
        let mut b = x;
        let mut prev = pot.value(b);
        let mut integral = 0.0;
        for _ in 0..steps {
            let z: f64 = r.sample(StandardNormal);
            b += sd * z;
            if b < lo || b > hi {
                return Err(Error::Domain(format!("path left the potential window at {b}")));
            }
            let cur = pot.value(b);
            integral += 0.5 * (prev + cur) * h;
            prev = cur;
        }
        let w = integral.exp() * u0.value(b);
        row[0] = w;
        row[1] = w * w;
        Ok(())
    })?;
    let n = n_paths as f64;
    let mean = sums[0] / n;
    let var = ((sums[1] / n - mean * mean) * n / (n - 1.0)).max(0.0);
    Ok(PathEstimate { value: mean, standard_error: (var / n).sqrt(), n_paths, dt: h })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HitOptions {
    pub dt: f64,
    /// Brownian-bridge sub-step correction for crossings between grid times.
    pub bridge: bool,
    /// Stop a path once ∫(ζ+η) falls below this; its weight is then below e^floor.
    pub log_floor: f64,
    pub time_cap: f64,
}

impl Default for HitOptions {
    fn default() -> Self {
        Self { dt: 1e-2, bridge: true, log_floor: -30.0, time_cap: 1e6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HitSample {
    /// Hitting time of 0, or the stopping time if `truncated`.
    pub hit_time: f64,
    /// ∫_0^H ζ(B_s) ds.
    pub zeta_integral: f64,
    /// True when the path was stopped at the weight floor before hitting 0.
    pub truncated: bool,
}

impl HitSample {
    /// ∫_0^H (ζ + η) ds; −∞ for truncated paths.
    pub fn log_weight(&self, eta: f64) -> f64 {
        if self.truncated {
            f64::NEG_INFINITY
        } else {
            self.zeta_integral + eta * self.hit_time
        }
    }
}

/// Walk from `x > target` until the first passage below `target`.
pub fn simulate_until_hit(zeta: &dyn Potential, x: f64, target: f64, eta: f64, opts: &HitOptions, r: &mut Rng) -> Result<HitSample> {
    if !(x > target) || !(eta < 0.0) {
        return config(format!("need start above the target and eta < 0 (x = {x}, eta = {eta})"));
    }
    let dt = opts.dt;
    let sd = dt.sqrt();
    let (lo, hi) = zeta.domain();
    let mut a = x - target;
    let mut t = 0.0;
    let mut integral = 0.0;
    let mut prev = zeta.value(x);
    let z_target = zeta.value(target);
    loop {
        let z: f64 = r.sample(StandardNormal);
        let b = a + sd * z;
        let hit_frac = if b <= 0.0 {
            Some(a / (a - b))
        } else if opts.bridge {
            let e = 2.0 * a * b / dt;
            if e < 40.0 && r.random::<f64>() < (-e).exp() {
                Some(a / (a + b))
            } else {
                None
            }
        } else {
            None
        };
        if let Some(f) = hit_frac {
            integral += 0.5 * (prev + z_target) * f * dt;
            return Ok(HitSample { hit_time: t + f * dt, zeta_integral: integral, truncated: false });
        }
        let pos = b + target;
        if pos > hi || pos < lo {
            return Err(Error::Domain(format!("hitting path left the potential window at {pos}")));
        }
        let cur = zeta.value(pos);
        integral += 0.5 * (prev + cur) * dt;
        prev = cur;
        a = b;
        t += dt;
        if integral + eta * t < opts.log_floor {
            return Ok(HitSample { hit_time: t, zeta_integral: integral, truncated: true });
        }
        if t > opts.time_cap {
            return Err(Error::TimeCap { cap: opts.time_cap });
        }
    }
}

/// E_x[exp(∫_0^{H_0} (ζ+η))] over `n_paths` paths.
pub fn estimate_hitting_mgf(zeta: &dyn Potential, x: f64, eta: f64, n_paths: usize, opts: &HitOptions, seed: u64) -> Result<PathEstimate> {
    if n_paths < 2 {
        return config("n_paths must be >= 2");
    }
    let sums = blocked_sums(n_paths, seed, 0x417, 2, |r, row| {
        let s = simulate_until_hit(zeta, x, 0.0, eta, opts, r)?;
        let w = s.log_weight(eta).exp();
        row[0] = w;
        row[1] = w * w;
        Ok(())
    })?;
    let n = n_paths as f64;
    let mean = sums[0] / n;
    let var = ((sums[1] / n - mean * mean) * n / (n - 1.0)).max(0.0);
    Ok(PathEstimate { value: mean, standard_error: (var / n).sqrt(), n_paths, dt: opts.dt })
}

#[derive(Debug, Clone)]
pub struct LyapunovConfig {
    pub dx: f64,
    /// `None` uses the largest stable step.
    pub dt: Option<f64>,
    /// Half-width of the window following each ray.
    pub half_width: f64,
    pub init: InitialCondition,
}

impl Default for LyapunovConfig {
    fn default() -> Self {
        Self { dx: 0.05, dt: None, half_width: 60.0, init: InitialCondition::Heaviside }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovCurve {
    pub points: Vec<(f64, f64)>,
    pub t_used: f64,
    pub method: &'static str,
}

impl LyapunovCurve {
    pub fn csv(&self) -> String {
        let mut s = String::from("v,lambda_hat,t_used\n");
        for &(v, l) in &self.points {
            s.push_str(&format!("{},{},{}\n", crate::fmt_float(v), crate::fmt_float(l), crate::fmt_float(self.t_used)));
        }
        s
    }

    /// Largest discrete second difference over grid points with v ≥ v_min.
    pub fn max_second_difference(&self, v_min: f64) -> f64 {
        let p: Vec<&(f64, f64)> = self.points.iter().filter(|(v, _)| *v >= v_min).collect();
        p.windows(3)
            .map(|w| {
                let (h1, h2) = (w[1].0 - w[0].0, w[2].0 - w[1].0);
                let slope1 = (w[1].1 - w[0].1) / h1;
                let slope2 = (w[2].1 - w[1].1) / h2;
                (slope2 - slope1) * 0.5 * (h1 + h2)
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Λ̂(v) from one PAM solve in a window moving along the ray x = v s.
///
/// Uses [ln u(t, vt) − ln u(t/2, vt/2)]/(t/2), which cancels the
/// polynomial prefactors that bias (1/t) ln u(t, vt) at moderate t.
pub fn lyapunov_point(pot: &dyn Potential, v: f64, t: f64, cfg: &LyapunovConfig) -> Result<f64> {
    if !(t > 0.0) {
        return config("t must be positive");
    }
    let dt = cfg.dt.unwrap_or_else(|| SolverConfig::stable_dt(cfg.dx, pot.es()));
    let solver = SolverConfig {
        dx: cfg.dx,
        dt,
        window: WindowPolicy::Ray { v, half_width: cfg.half_width },
        cadence: Some(t / 2.0),
        ..Default::default()
    };
    check_domain(pot, -cfg.half_width, v.max(0.0) * t + cfg.half_width + 1.0)?;
    let nl = Nonlinearity::binary();
    let mut logs: Vec<(f64, f64)> = Vec::new();
    solve_with(FieldKind::Pam, pot, &nl, &cfg.init, t, &solver, |f| {
        if f.time > 0.0 {
            let l = f
                .log_value_at(v * f.time)
                .ok_or_else(|| Error::InsufficientResolution(format!("u({}, {}) below the window floor", f.time, v * f.time)))?;
            logs.push((f.time, l));
        }
        Ok(())
    })?;
    let (t1, l1) = logs[logs.len() - 2];
    let (t2, l2) = logs[logs.len() - 1];
    Ok((l2 - l1) / (t2 - t1))
}

pub fn estimate_lyapunov(pot: &dyn Potential, v_grid: &[f64], t: f64, cfg: &LyapunovConfig) -> Result<LyapunovCurve> {
    let points: Result<Vec<(f64, f64)>> = v_grid.par_iter().map(|&v| lyapunov_point(pot, v, t, cfg).map(|l| (v, l))).collect();
    Ok(LyapunovCurve { points: points?, t_used: t, method: "fd-solver" })
}

#[derive(Debug, Clone, PartialEq)]
pub struct V0Estimate {
    pub v0: f64,
    pub bracket: (f64, f64),
    pub curve: LyapunovCurve,
}

#[derive(Debug, Clone)]
pub struct V0Config {
    pub t: f64,
    pub grid_step: f64,
    /// Grid runs up to √(2 es) + this.
    pub grid_pad: f64,
    pub tol: f64,
    pub lyapunov: LyapunovConfig,
}

impl Default for V0Config {
    fn default() -> Self {
        Self { t: 30.0, grid_step: 0.25, grid_pad: 0.5, tol: 0.01, lyapunov: LyapunovConfig::default() }
    }
}

/// Root of Λ̂: coarse grid for a sign change, bisection with fresh solves,
/// then linear interpolation inside the final bracket.
pub fn estimate_v0(pot: &dyn Potential, cfg: &V0Config) -> Result<V0Estimate> {
    let vmax = (2.0 * pot.es()).sqrt() + cfg.grid_pad;
    let n = (vmax / cfg.grid_step).ceil() as usize;
    let grid: Vec<f64> = (1..=n).map(|i| i as f64 * cfg.grid_step).collect();
    let curve = estimate_lyapunov(pot, &grid, cfg.t, &cfg.lyapunov)?;
    let idx = curve.points.windows(2).position(|w| w[0].1 > 0.0 && w[1].1 <= 0.0);
    let Some(i) = idx else {
        return Err(Error::Bracket { curve: curve.points.clone() });
    };
    let (mut a, mut fa) = curve.points[i];
    let (mut b, mut fb) = curve.points[i + 1];
    while b - a > cfg.tol {
        let mid = 0.5 * (a + b);
        let fm = lyapunov_point(pot, mid, cfg.t, &cfg.lyapunov)?;
        if fm > 0.0 {
            (a, fa) = (mid, fm);
        } else {
            (b, fb) = (mid, fm);
        }
    }
    let v0 = a + (b - a) * fa / (fa - fb);
    Ok(V0Estimate { v0, bracket: (a, b), curve })
}
