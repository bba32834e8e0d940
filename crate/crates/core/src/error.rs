use thiserror::Error;

/// Errors produced by the noise, coefficient, scheme and valuation layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("non-finite value at {location}")]
    NonFinite { location: String },

    #[error("matrix is not positive semidefinite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("time {t} outside [0, {horizon}]")]
    OutOfRange { t: f64, horizon: f64 },

    #[error("tree too deep: {nodes} nodes exceeds budget {budget}; use the grid engine")]
    TreeTooDeep { nodes: u128, budget: u128 },

    #[error("enumeration limit exceeded: {0}")]
    EnumerationLimit(String),

    #[error("state {state:?} at step {step} escaped the grid")]
    GridEscape { step: usize, state: Vec<f64> },

    #[error("payoff ordering violated at step {step}: G = {upper} < F = {lower}")]
    PayoffOrdering { step: usize, lower: f64, upper: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}

pub(crate) fn ensure_finite(values: &[f64], location: impl FnOnce() -> String) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            location: location(),
        })
    }
}
