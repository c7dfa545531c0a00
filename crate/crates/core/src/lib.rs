//! Random potentials, front solvers for PAM and randomized F-KPP, branching
//! Brownian motion in random environment, and the two-system particle coupling.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bbmre;
pub mod branching_law;
pub mod coupling;
pub mod environment;
pub mod error;
pub mod feynman_kac;
pub mod mgf;
pub mod pde_solver;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Decimal float with 17 significant digits, as used in every CSV body.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}
