//! Configuration, experiment drivers and run manifests for the `frontlab` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod experiments;
pub mod manifest;
pub mod tasks;

pub use config::ExperimentConfig;
pub use tasks::{Experiment, Task};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
}

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_PRECONDITION: i32 = 4;
pub const EXIT_VERDICT: i32 = 5;

/// Process exit code for a failed run.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if let Some(e) = err.downcast_ref::<CliError>() {
        return match e {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Precondition(_) => EXIT_PRECONDITION,
        };
    }
    if let Some(e) = err.downcast_ref::<frontlab::Error>() {
        use frontlab::Error::*;
        return match e {
            Config(_) => EXIT_CONFIG,
            Domain(_) | Infeasible(_) | SubcriticalVelocity { .. } => EXIT_PRECONDITION,
            _ => EXIT_NUMERICAL,
        };
    }
    1
}

/// Exit code for a completed run with the given verdict.
pub fn verdict_code(verdict: Option<&experiments::Verdict>) -> i32 {
    match verdict {
        Some(v) if !v.supported => EXIT_PRECONDITION,
        Some(v) if !v.passed => EXIT_VERDICT,
        _ => 0,
    }
}
