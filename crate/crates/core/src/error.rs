use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numerical instability: {0}")]
    NumericalInstability(String),
    #[error("front reached the window edge at t = {t}: {detail}")]
    WindowEscape { t: f64, detail: String },
    #[error("insufficient resolution: {0}")]
    InsufficientResolution(String),
    #[error("no sign change on the sampled curve ({} points)", curve.len())]
    Bracket { curve: Vec<(f64, f64)> },
    #[error("subcritical velocity v = {v}: {detail}")]
    SubcriticalVelocity { v: f64, detail: String },
    #[error("path exceeded the hitting-time cap {cap}")]
    TimeCap { cap: f64 },
    #[error("estimators disagree: {0}")]
    Inconsistency(String),
    #[error("unreliable estimate: {0}")]
    Unreliable(String),
    #[error("infeasible parameters: {0}")]
    Infeasible(String),
    #[error("internal consistency violation: {0}")]
    InternalConsistency(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
