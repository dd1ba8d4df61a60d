use thiserror::Error;

/// Errors raised by synthesis, simulation and the oracle.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error(
        "{context}: matrix is singular to working precision (condition estimate {condition:.3e})"
    )]
    Singular { context: String, condition: f64 },

    #[error("target tensor is incompatible (residual {residual:.6e})")]
    Incompatible { residual: f64 },

    #[error("agent {agent} cannot steer the system over the horizon (gramian condition {condition:.3e})")]
    Uncontrollable { agent: usize, condition: f64 },

    #[error(
        "t = {t} lies within {guard:.3e} of the terminal time; feedback gains are singular there"
    )]
    HorizonExhausted { t: f64, guard: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("inconsistent constraints: {0}")]
    Consistency(String),
}

pub type Result<T> = std::result::Result<T, Error>;
