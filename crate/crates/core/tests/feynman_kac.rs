use frontlab::branching_law::Nonlinearity;
use frontlab::environment::{BumpProfile, ConstantPotential, PoissonBumpPotential, Potential};
use frontlab::feynman_kac::{estimate_lyapunov, estimate_u_mc, LyapunovConfig};
use frontlab::pde_solver::{solve_with, FieldKind, InitialCondition, SolverConfig, WindowPolicy};
use frontlab::rng;
use rand::Rng;

fn fd_u(pot: &dyn Potential, t: f64, x: f64) -> f64 {
    let dx = 0.02;
    let cfg = SolverConfig {
        dx,
        dt: SolverConfig::stable_dt(dx, pot.es()),
        window: WindowPolicy::Fixed { lo: -25.0, hi: 25.0 },
        ..Default::default()
    };
    let f = solve_with(FieldKind::Pam, pot, &Nonlinearity::binary(), &InitialCondition::Heaviside, t, &cfg, |_| Ok(())).unwrap();
    f.log_value_at(x).unwrap().exp()
}

/// Points with x ≤ 3√t, where a visible share of paths ends in the support of u0.
fn points(seed: u64) -> Vec<(f64, f64)> {
    let mut r = rng::stream(seed, 0);
    let mut out = Vec::new();
    while out.len() < 5 {
        let t: f64 = r.random_range(0.5..4.0);
        let x: f64 = r.random_range(-4.0..4.0);
        if x <= 3.0 * t.sqrt() {
            out.push((t, x));
        }
    }
    out
}

fn check_class(pot: &dyn Potential, seed: u64) {
    for (i, (t, x)) in points(seed).into_iter().enumerate() {
        let mc = estimate_u_mc(pot, t, x, &InitialCondition::Heaviside, 20_000, 0.005, 100 + i as u64).unwrap();
        let fd = fd_u(pot, t, x);
        assert!(
            (mc.value - fd).abs() <= 3.0 * mc.standard_error + 2e-3 * fd,
            "t = {t}, x = {x}: MC {} +- {}, FD {fd}",
            mc.value,
            mc.standard_error
        );
    }
}

#[test]
fn mc_matches_fd_constant() {
    check_class(&ConstantPotential::new(1.0), 1);
}

#[test]
fn mc_matches_fd_poisson() {
    let pot = PoissonBumpPotential::sample(1.0, 3.0, 1.0, BumpProfile::default(), (-40.0, 40.0), 5).unwrap();
    check_class(&pot, 2);
}

#[test]
fn lyapunov_concave_and_decreasing() {
    let poisson = PoissonBumpPotential::sample(1.0, 3.0, 1.0, BumpProfile::default(), (-70.0, 220.0), 11).unwrap();
    let grid: Vec<f64> = (2..=10).map(|i| 0.25 * i as f64).collect();
    let pots: [&dyn Potential; 2] = [&ConstantPotential::new(1.0), &poisson];
    for pot in pots {
        let curve = estimate_lyapunov(pot, &grid, 60.0, &LyapunovConfig::default()).unwrap();
        assert!(curve.max_second_difference(0.5) <= 0.02, "{:?}", curve.points);
        for w in curve.points.windows(2) {
            assert!(w[1].1 < w[0].1, "{:?}", curve.points);
        }
    }
}
