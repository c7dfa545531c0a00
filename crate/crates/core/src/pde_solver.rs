//! Explicit finite differences for PAM and F-KPP on a moving window.

use std::sync::Arc;

use crate::branching_law::Nonlinearity;
use crate::environment::{check_domain, Potential};
use crate::error::{config, Error, Result};
use crate::fmt_float;

/// Values below this fraction of the PAM mantissa scale are flushed to zero.
const PAM_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Pam,
    Fkpp,
}

/// Grid snapshot. Node i sits at `(k0 + i) * dx`; PAM values are
/// `values[i] * exp(log_exponent)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub kind: FieldKind,
    pub dx: f64,
    pub k0: i64,
    pub values: Vec<f64>,
    pub log_exponent: f64,
    pub time: f64,
}

impl Field {
    pub fn x(&self, i: usize) -> f64 {
        (self.k0 + i as i64) as f64 * self.dx
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn span(&self) -> (f64, f64) {
        (self.x(0), self.x(self.len() - 1))
    }

    /// Natural log of the field value at node i (`-inf` for zero).
    pub fn log_at(&self, i: usize) -> f64 {
        self.values[i].ln() + self.log_exponent
    }

    /// ln of the field at x, interpolated linearly in log space.
    pub fn log_value_at(&self, x: f64) -> Option<f64> {
        let (a, b) = self.span();
        if !(a..=b).contains(&x) {
            return None;
        }
        let s = (x - a) / self.dx;
        let i = (s.floor() as usize).min(self.len() - 2);
        let f = s - i as f64;
        let (v0, v1) = (self.values[i], self.values[i + 1]);
        if f == 0.0 {
            return (v0 > 0.0).then(|| self.log_at(i));
        }
        if v0 <= 0.0 || v1 <= 0.0 {
            let v = v0 * (1.0 - f) + v1 * f;
            return (v > 0.0).then(|| v.ln() + self.log_exponent);
        }
        Some(self.log_at(i) * (1.0 - f) + self.log_at(i + 1) * f)
    }

    /// Field value at x, linear interpolation (F-KPP scale).
    pub fn value_at(&self, x: f64) -> Option<f64> {
        self.log_value_at(x).map(f64::exp)
    }

    pub fn snapshot_csv_rows(&self, out: &mut String) {
        for (i, v) in self.values.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                fmt_float(self.time),
                fmt_float(self.x(i)),
                fmt_float(*v),
                fmt_float(self.log_exponent)
            ));
        }
    }
}

pub const SNAPSHOT_HEADER: &str = "t,x,value,log_exponent";

#[derive(Clone)]
pub enum InitialCondition {
    /// 1 on (−∞, 0].
    Heaviside,
    /// `height` on [−width, 0]; the lower member of the admissible PAM class.
    Box {
        height: f64,
        width: f64,
    },
    /// `height` on (−∞, 0]; the upper member of the admissible PAM class.
    Step {
        height: f64,
    },
    Flat(f64),
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for InitialCondition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Heaviside => write!(f, "Heaviside"),
            Self::Box { height, width } => write!(f, "Box({height}, {width})"),
            Self::Step { height } => write!(f, "Step({height})"),
            Self::Flat(c) => write!(f, "Flat({c})"),
            Self::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl InitialCondition {
    pub fn value(&self, x: f64) -> f64 {
        match self {
            Self::Heaviside => (x <= 0.0) as u8 as f64,
            Self::Box { height, width } => {
                if (-width..=0.0).contains(&x) {
                    *height
                } else {
                    0.0
                }
            }
            Self::Step { height } => {
                if x <= 0.0 {
                    *height
                } else {
                    0.0
                }
            }
            Self::Flat(c) => *c,
            Self::Custom(f) => f(x),
        }
    }

    /// Value used for cells entering the window from the left.
    fn far_left(&self) -> f64 {
        match self {
            Self::Heaviside => 1.0,
            Self::Step { height } => *height,
            Self::Flat(c) => *c,
            Self::Box { .. } => 0.0,
            Self::Custom(f) => f(-1e12),
        }
    }

    /// Both extreme members of the class with δ′·1_{[−δ′,0]} ≤ u0 ≤ C′·1_{(−∞,0]}.
    pub fn pam_class(delta: f64, c_big: f64) -> (Self, Self) {
        (Self::Box { height: delta, width: delta }, Self::Step { height: c_big })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Boundary {
    Dirichlet(f64),
    Neumann,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WindowPolicy {
    Fixed {
        lo: f64,
        hi: f64,
    },
    /// Recentre on the level-½ front whenever it comes within `margin` of an edge.
    /// `None` means 30 + 10·√t_end.
    Track {
        margin: Option<f64>,
    },
    /// Window [v t − h, v t + h] following a ray.
    Ray {
        v: f64,
        half_width: f64,
    },
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub dx: f64,
    pub dt: f64,
    pub window: WindowPolicy,
    /// Left/right ghost values; `None` picks the default for the field kind.
    pub boundary: Option<(Boundary, Boundary)>,
    /// Time between observations; `None` observes only at t_end.
    pub cadence: Option<f64>,
    pub keep_snapshots: bool,
    pub eps: f64,
    pub big_m: f64,
    /// Hold w = 1 on (−∞, level], making that region absorbing.
    pub absorb_below: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            dx: 0.05,
            dt: 0.001,
            window: WindowPolicy::Track { margin: None },
            boundary: None,
            cadence: None,
            keep_snapshots: false,
            eps: 0.1,
            big_m: 10.0,
            absorb_below: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self, es: f64) -> Result<()> {
        if !(self.dx > 0.0 && self.dt > 0.0) {
            return config(format!("dx and dt must be positive (dx = {}, dt = {})", self.dx, self.dt));
        }
        if self.dt > 0.4 * self.dx * self.dx * (1.0 + 1e-12) {
            return config(format!("dt = {} violates the diffusion bound dt <= 0.4 dx^2 = {}", self.dt, 0.4 * self.dx * self.dx));
        }
        if es > 0.0 && self.dt > 0.1 / es * (1.0 + 1e-12) {
            return config(format!("dt = {} violates the reaction bound dt <= 0.1/es = {}", self.dt, 0.1 / es));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) || !(self.big_m > self.eps) {
            return config("front levels need 0 < eps < 1 and M > eps");
        }
        if let Some(c) = self.cadence {
            if !(c > 0.0) {
                return config("observer cadence must be positive");
            }
        }
        match self.window {
            WindowPolicy::Fixed { lo, hi } if !(lo < hi) => config("fixed window needs lo < hi"),
            WindowPolicy::Track { margin: Some(m) } if !(m > 0.0) => config("window margin must be positive"),
            WindowPolicy::Ray { half_width, .. } if !(half_width > 0.0) => config("ray half-width must be positive"),
            _ => Ok(()),
        }
    }

    /// Largest admissible dt for the given dx and potential ceiling.
    pub fn stable_dt(dx: f64, es: f64) -> f64 {
        let d = 0.4 * dx * dx;
        if es > 0.0 {
            d.min(0.1 / es)
        } else {
            d
        }
    }
}

/// Front positions at one time. For F-KPP rows `m_eps_minus` holds m^{1−ε,−}
/// and the bar fields are NaN; for PAM rows `m_eps`/`m_eps_minus` are the
/// ε-level quantities of u.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontReport {
    pub t: f64,
    pub m_eps: f64,
    pub m_eps_minus: f64,
    pub mbar_m: f64,
    pub mbar_m_minus: f64,
    pub width_fkpp: f64,
    pub width_pam: f64,
}

pub const TRAJECTORY_HEADER: &str = "t,m_eps,m_eps_minus,mbar_M,mbar_M_minus,width_fkpp,width_pam";

impl FrontReport {
    pub fn csv_row(&self) -> String {
        [self.t, self.m_eps, self.m_eps_minus, self.mbar_m, self.mbar_m_minus, self.width_fkpp, self.width_pam]
            .iter()
            .map(|&v| fmt_float(v))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// sup{x : f(x) ≥ level}; `-inf` if never attained.
pub fn sup_level(field: &Field, level: f64) -> f64 {
    let ll = level.ln();
    let n = field.len();
    let Some(i) = (0..n).rev().find(|&i| field.log_at(i) >= ll) else {
        return f64::NEG_INFINITY;
    };
    if i + 1 == n {
        return field.x(i);
    }
    field.x(i) + field.dx * crossing_fraction(field, i, ll)
}

/// inf{x ≥ 0 : f(x) ≤ level}; `+inf` if never attained.
pub fn inf_level_from_zero(field: &Field, level: f64) -> f64 {
    let ll = level.ln();
    let n = field.len();
    let first = (0..n).find(|&i| field.x(i) >= 0.0);
    let Some(first) = first else {
        return f64::INFINITY;
    };
    let Some(j) = (first..n).find(|&j| field.log_at(j) <= ll) else {
        return f64::INFINITY;
    };
    if j == 0 {
        return field.x(0).max(0.0);
    }
    let x = field.x(j - 1) + field.dx * crossing_fraction(field, j - 1, ll);
    x.max(0.0)
}

/// Fraction of the cell [i, i+1] where the interpolant crosses `log_level`,
/// assuming node i is on the upper side.
fn crossing_fraction(field: &Field, i: usize, log_level: f64) -> f64 {
    let (v0, v1) = (field.values[i], field.values[i + 1]);
    if field.kind == FieldKind::Fkpp || v1 <= 0.0 {
        let level = (log_level - field.log_exponent).exp();
        if v0 == v1 {
            return 0.0;
        }
        return ((v0 - level) / (v0 - v1)).clamp(0.0, 1.0);
    }
    let (l0, l1) = (field.log_at(i), field.log_at(i + 1));
    if l0 == l1 {
        return 0.0;
    }
    ((l0 - log_level) / (l0 - l1)).clamp(0.0, 1.0)
}

pub fn front_positions(field: &Field, eps: f64, big_m: f64) -> FrontReport {
    match field.kind {
        FieldKind::Fkpp => {
            let m_eps = sup_level(field, eps);
            let m_minus = inf_level_from_zero(field, 1.0 - eps);
            FrontReport {
                t: field.time,
                m_eps,
                m_eps_minus: m_minus,
                mbar_m: f64::NAN,
                mbar_m_minus: f64::NAN,
                width_fkpp: m_eps - m_minus,
                width_pam: f64::NAN,
            }
        }
        FieldKind::Pam => {
            let m_eps = sup_level(field, eps);
            let mbar_minus = inf_level_from_zero(field, big_m);
            FrontReport {
                t: field.time,
                m_eps,
                m_eps_minus: inf_level_from_zero(field, eps),
                mbar_m: sup_level(field, big_m),
                mbar_m_minus: mbar_minus,
                width_fkpp: f64::NAN,
                width_pam: m_eps - mbar_minus,
            }
        }
    }
}

/// One explicit Euler step. `xi[i]` is the potential at node i.
pub fn step(
    field: &mut Field,
    xi: &[f64],
    nl: &Nonlinearity,
    dt: f64,
    boundary: (Boundary, Boundary),
    scratch: &mut Vec<f64>,
) -> Result<()> {
    let n = field.len();
    if xi.len() != n || n < 3 {
        return config("potential grid does not match the field grid");
    }
    let lam = 0.5 * dt / (field.dx * field.dx);
    let ghost = |b: Boundary, edge: f64, scale: f64| match b {
        Boundary::Dirichlet(v) => v * scale,
        Boundary::Neumann => edge,
    };
    // Dirichlet ghosts for PAM are given in absolute units.
    let scale = match field.kind {
        FieldKind::Pam => (-field.log_exponent).exp(),
        FieldKind::Fkpp => 1.0,
    };
    let u = &field.values;
    let left = ghost(boundary.0, u[0], scale);
    let right = ghost(boundary.1, u[n - 1], scale);
    scratch.clear();
    scratch.reserve(n);
    match field.kind {
        FieldKind::Fkpp => {
            for i in 0..n {
                let um = if i == 0 { left } else { u[i - 1] };
                let up = if i + 1 == n { right } else { u[i + 1] };
                let w = u[i];
                let next = w + lam * (um + up - 2.0 * w) + dt * xi[i] * nl.f_unchecked(w);
                scratch.push(next.clamp(0.0, 1.0));
            }
            if !scratch.iter().all(|v| v.is_finite()) {
                return Err(Error::NumericalInstability(format!(
                    "non-finite F-KPP value at t = {}; check dt <= 0.4 dx^2 and dt <= 0.1/es",
                    field.time
                )));
            }
        }
        FieldKind::Pam => {
            let mut max: f64 = 0.0;
            for i in 0..n {
                let um = if i == 0 { left } else { u[i - 1] };
                let up = if i + 1 == n { right } else { u[i + 1] };
                let v = u[i];
                let mut next = v + lam * (um + up - 2.0 * v) + dt * xi[i] * v;
                if next < PAM_FLOOR {
                    next = 0.0;
                }
                max = max.max(next);
                scratch.push(next);
            }
            if !max.is_finite() {
                return Err(Error::NumericalInstability(format!(
                    "PAM mantissa overflow at t = {}; check dt <= 0.4 dx^2 and dt <= 0.1/es",
                    field.time
                )));
            }
            if max > 0.0 && !(0.5..=2.0).contains(&max) {
                let inv = 1.0 / max;
                for v in scratch.iter_mut() {
                    *v *= inv;
                    if *v < PAM_FLOOR {
                        *v = 0.0;
                    }
                }
                field.log_exponent += max.ln();
            }
        }
    }
    std::mem::swap(&mut field.values, scratch);
    field.time += dt;
    Ok(())
}

pub struct Trajectory {
    pub reports: Vec<FrontReport>,
    pub snapshots: Vec<Field>,
    pub last: Field,
}

impl Trajectory {
    pub fn csv(&self) -> String {
        let mut s = String::from(TRAJECTORY_HEADER);
        s.push('\n');
        for r in &self.reports {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Solve PAM or F-KPP to `t_end`, calling `observe` at t = 0, at every
/// multiple of the cadence and at `t_end`.
#[allow(clippy::too_many_arguments)]
pub fn solve_with<F>(
    kind: FieldKind,
    pot: &dyn Potential,
    nl: &Nonlinearity,
    init: &InitialCondition,
    t_end: f64,
    cfg: &SolverConfig,
    mut observe: F,
) -> Result<Field>
where
    F: FnMut(&Field) -> Result<()>,
{
    cfg.validate(pot.es())?;
    if !(t_end >= 0.0) {
        return config(format!("t_end must be >= 0, got {t_end}"));
    }
    let dx = cfg.dx;
    let boundary = cfg.boundary.unwrap_or(match kind {
        FieldKind::Fkpp => (Boundary::Dirichlet(1.0), Boundary::Dirichlet(0.0)),
        FieldKind::Pam => (Boundary::Neumann, Boundary::Neumann),
    });
    let margin = match cfg.window {
        WindowPolicy::Track { margin } => margin.unwrap_or(30.0 + 10.0 * t_end.sqrt()),
        _ => 0.0,
    };
    let (lo, hi) = match cfg.window {
        WindowPolicy::Fixed { lo, hi } => (lo, hi),
        WindowPolicy::Track { .. } => (-1.5 * margin, 1.5 * margin),
        WindowPolicy::Ray { half_width, .. } => (-half_width, half_width),
    };
    let k0 = (lo / dx).round() as i64;
    let k1 = (hi / dx).round() as i64;
    let n = (k1 - k0 + 1) as usize;
    if n < 3 {
        return config("window holds fewer than 3 nodes");
    }
    let mut field =
        Field { kind, dx, k0, values: (0..n).map(|i| init.value((k0 + i as i64) as f64 * dx)).collect(), log_exponent: 0.0, time: 0.0 };
    if kind == FieldKind::Fkpp && field.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return config("F-KPP initial data must take values in [0, 1]");
    }
    if kind == FieldKind::Pam {
        if field.values.iter().any(|v| !(*v >= 0.0)) {
            return config("PAM initial data must be non-negative");
        }
        let max = field.values.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            for v in field.values.iter_mut() {
                *v /= max;
            }
            field.log_exponent = max.ln();
        }
    }
    let (a, b) = field.span();
    check_domain(pot, a, b)?;
    let mut xi: Vec<f64> = (0..n).map(|i| pot.value(field.x(i))).collect();
    let absorb = |f: &mut Field| {
        if let Some(level) = cfg.absorb_below {
            for i in 0..f.len() {
                if f.x(i) <= level {
                    f.values[i] = 1.0;
                } else {
                    break;
                }
            }
        }
    };
    absorb(&mut field);

    let steps = (t_end / cfg.dt).round() as u64;
    let obs_every = cfg.cadence.map(|c| ((c / cfg.dt).round() as u64).max(1));
    let mut scratch = Vec::with_capacity(n);
    observe(&field)?;
    let recentre_every = 8u64;
    for s in 1..=steps {
        step(&mut field, &xi, nl, cfg.dt, boundary, &mut scratch)?;
        field.time = s as f64 * cfg.dt;
        absorb(&mut field);
        match cfg.window {
            WindowPolicy::Fixed { .. } => {}
            WindowPolicy::Track { .. } => {
                if s % recentre_every == 0 || s == steps {
                    let front = sup_level(&field, 0.5);
                    let (a, b) = field.span();
                    if front.is_finite() && (front - a < margin || b - front < margin) {
                        let by = ((front - 0.5 * (b - a)) / dx).round() as i64 - field.k0;
                        shift(&mut field, &mut xi, pot, init, by)?;
                    }
                    let front = sup_level(&field, 0.5);
                    let (a, b) = field.span();
                    if front >= b || (front.is_finite() && front <= a) {
                        return Err(Error::WindowEscape {
                            t: field.time,
                            detail: format!("front at {front}, window [{a}, {b}]; increase the margin"),
                        });
                    }
                }
            }
            WindowPolicy::Ray { v, half_width } => {
                let target = ((v * field.time - half_width) / dx).round() as i64;
                let by = target - field.k0;
                if by != 0 {
                    shift(&mut field, &mut xi, pot, init, by)?;
                }
            }
        }
        let due = obs_every.is_some_and(|e| s % e == 0);
        if due || s == steps {
            observe(&field)?;
        }
    }
    Ok(field)
}

/// Move the window by `by` whole cells.
fn shift(field: &mut Field, xi: &mut Vec<f64>, pot: &dyn Potential, init: &InitialCondition, by: i64) -> Result<()> {
    if by == 0 {
        return Ok(());
    }
    let n = field.len();
    let new_k0 = field.k0 + by;
    let (a, b) = ((new_k0) as f64 * field.dx, (new_k0 + n as i64 - 1) as f64 * field.dx);
    check_domain(pot, a, b)?;
    let fill_left = match field.kind {
        FieldKind::Fkpp => init.far_left().clamp(0.0, 1.0),
        FieldKind::Pam => field.values[0],
    };
    let mut values = vec![0.0; n];
    let mut new_xi = vec![0.0; n];
    for (i, (v, x)) in values.iter_mut().zip(new_xi.iter_mut()).enumerate() {
        let old = i as i64 + by;
        if (0..n as i64).contains(&old) {
            *v = field.values[old as usize];
            *x = xi[old as usize];
        } else {
            *v = if old < 0 { fill_left } else { 0.0 };
            *x = pot.value((new_k0 + i as i64) as f64 * field.dx);
        }
    }
    field.values = values;
    *xi = new_xi;
    field.k0 = new_k0;
    Ok(())
}

pub fn solve(
    kind: FieldKind,
    pot: &dyn Potential,
    nl: &Nonlinearity,
    init: &InitialCondition,
    t_end: f64,
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    let mut reports = Vec::new();
    let mut snapshots = Vec::new();
    let last = solve_with(kind, pot, nl, init, t_end, cfg, |f| {
        reports.push(front_positions(f, cfg.eps, cfg.big_m));
        if cfg.keep_snapshots {
            snapshots.push(f.clone());
        }
        Ok(())
    })?;
    Ok(Trajectory { reports, snapshots, last })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpacePerturbation {
    /// (h, ln(u(t, vt + h)/u(t, vt)), decay rate −log_ratio/h); h = 0 is skipped.
    pub rates: Vec<(f64, f64, f64)>,
    /// Smallest C with C⁻¹e^{−Ch} ≤ ratio ≤ C e^{−h/C} on the whole h-grid.
    pub c_min: f64,
}

pub fn check_space_perturbation(field: &Field, v: f64, hs: &[f64]) -> Result<SpacePerturbation> {
    let x0 = v * field.time;
    let l0 = field
        .log_value_at(x0)
        .filter(|l| l.is_finite())
        .ok_or_else(|| Error::InsufficientResolution(format!("u(t, vt) at x = {x0} is outside the window or below the floor")))?;
    let mut rates = Vec::new();
    for &h in hs {
        if h == 0.0 {
            continue;
        }
        let l = field
            .log_value_at(x0 + h)
            .filter(|l| l.is_finite())
            .ok_or_else(|| Error::InsufficientResolution(format!("u(t, vt + {h}) is outside the window or below the floor")))?;
        let lr = l - l0;
        rates.push((h, lr, -lr / h));
    }
    let feasible = |c: f64| rates.iter().all(|&(h, lr, _)| -c.ln() - c * h <= lr && lr <= c.ln() - h / c);
    let (mut lo, mut hi) = (1.0, 2.0);
    while !feasible(hi) {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::InsufficientResolution("no feasible sandwich constant below 1e12".into()));
        }
    }
    if feasible(lo) {
        hi = lo;
    }
    while hi - lo > 1e-9 * hi {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(SpacePerturbation { rates, c_min: hi })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::ConstantPotential;
    use crate::stats::normal_cdf;

    fn fkpp_field(values: Vec<f64>, dx: f64, k0: i64) -> Field {
        Field { kind: FieldKind::Fkpp, dx, k0, values, log_exponent: 0.0, time: 0.0 }
    }

    #[test]
    fn fkpp_constants_are_fixed_points() {
        let nl = Nonlinearity::binary();
        let xi = vec![2.0; 10];
        let nb = (Boundary::Neumann, Boundary::Neumann);
        let mut scratch = Vec::new();
        for c in [0.0, 1.0] {
            let mut f = fkpp_field(vec![c; 10], 0.1, 0);
            step(&mut f, &xi, &nl, 0.001, nb, &mut scratch).unwrap();
            assert!(f.values.iter().all(|&v| v == c));
        }
    }

    #[test]
    fn pam_constant_growth() {
        let nl = Nonlinearity::binary();
        let mut f = Field { kind: FieldKind::Pam, dx: 0.1, k0: 0, values: vec![1.0; 10], log_exponent: 0.0, time: 0.0 };
        let mut scratch = Vec::new();
        step(&mut f, &[1.0; 10], &nl, 0.001, (Boundary::Neumann, Boundary::Neumann), &mut scratch).unwrap();
        assert!(f.values.iter().all(|&v| (v - 1.001).abs() < 1e-15));
    }

    #[test]
    fn step_front_interpolation() {
        let dx = 0.1;
        let values: Vec<f64> = (0..100).map(|i| if i as f64 * dx <= 3.0 + 1e-9 { 1.0 } else { 0.0 }).collect();
        let f = fkpp_field(values, dx, 0);
        assert!((sup_level(&f, 0.5) - (3.0 + dx / 2.0)).abs() < 1e-12);

        let flat = fkpp_field(vec![0.2; 20], dx, 0);
        assert_eq!(sup_level(&flat, 0.5), f64::NEG_INFINITY);

        let dx = 0.25;
        let ramp: Vec<f64> = (0..=40).map(|i| 1.0 - i as f64 * dx / 10.0).collect();
        let f = fkpp_field(ramp, dx, 0);
        assert!((sup_level(&f, 0.25) - 7.5).abs() < 1e-12);
        assert!((inf_level_from_zero(&f, 0.75) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn config_rejects_unstable_dt() {
        let cfg = SolverConfig { dx: 0.05, dt: 0.002, ..Default::default() };
        assert!(matches!(cfg.validate(1.0), Err(Error::Config(_))));
        let cfg = SolverConfig { dx: 0.1, dt: 0.004, ..Default::default() };
        assert!(matches!(cfg.validate(50.0), Err(Error::Config(_))));
        assert!(SolverConfig::default().validate(5.0).is_ok());
    }

    #[test]
    fn pam_matches_closed_form() {
        let cfg = SolverConfig { dx: 0.01, dt: 4e-5, window: WindowPolicy::Fixed { lo: -20.0, hi: 20.0 }, ..Default::default() };
        let nl = Nonlinearity::binary();
        let f = solve_with(FieldKind::Pam, &ConstantPotential::new(1.0), &nl, &InitialCondition::Heaviside, 1.0, &cfg, |_| Ok(())).unwrap();
        for k in -6..=6 {
            let x = k as f64 * 0.5;
            let exact = std::f64::consts::E * normal_cdf(-x);
            let got = f.value_at(x).unwrap();
            assert!((got / exact - 1.0).abs() < 0.02, "x = {x}: {got} vs {exact}");
        }
    }

    #[test]
    fn flat_profile_follows_ode() {
        let cfg = SolverConfig {
            dx: 0.1,
            dt: 0.001,
            window: WindowPolicy::Fixed { lo: -1.0, hi: 1.0 },
            boundary: Some((Boundary::Neumann, Boundary::Neumann)),
            ..Default::default()
        };
        let nl = Nonlinearity::binary();
        let f =
            solve_with(FieldKind::Fkpp, &ConstantPotential::new(2.0), &nl, &InitialCondition::Flat(0.3), 1.0, &cfg, |_| Ok(())).unwrap();
        // logistic w' = 2 w (1 - w): w(1) = 1 / (1 + (1/0.3 - 1) e^{-2})
        let exact = 1.0 / (1.0 + (1.0 / 0.3 - 1.0) * (-2.0f64).exp());
        for v in &f.values {
            assert!((v - exact).abs() < 1e-4, "{v} vs {exact}");
        }
    }

    #[test]
    fn space_perturbation_closed_form() {
        let cfg = SolverConfig { dx: 0.02, dt: 1.6e-4, window: WindowPolicy::Fixed { lo: -30.0, hi: 30.0 }, ..Default::default() };
        let nl = Nonlinearity::binary();
        let t = 4.0;
        let v = 2.0;
        let f = solve_with(FieldKind::Pam, &ConstantPotential::new(1.0), &nl, &InitialCondition::Heaviside, t, &cfg, |_| Ok(())).unwrap();
        let hs = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0];
        let rep = check_space_perturbation(&f, v, &hs).unwrap();
        assert_eq!(rep.rates.len(), 6);
        for &(h, lr, _) in &rep.rates {
            let exact = normal_cdf(-(v * t + h) / t.sqrt()) / normal_cdf(-(v * t) / t.sqrt());
            assert!((lr.exp() / exact - 1.0).abs() < 0.03, "h = {h}");
        }
        assert!(rep.c_min >= 1.0 && rep.c_min.is_finite());
    }
}
