use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value at coordinate {0}")]
    NonFinite(usize),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("no closed-form oracle: {0}")]
    UnsupportedOracle(String),

    #[error("invalid chain state: {0}")]
    InvalidState(String),

    #[error("chain initialization failed: {0}")]
    Initialization(String),

    /// Tuning never bracketed the requested acceptance rate. Carries every
    /// `(theta, acceptance_rate)` pair that was tried.
    #[error("scale tuning failed to bracket the target rate after {} pilots", .trace.len())]
    Tuning { trace: Vec<(f64, f64)> },

    #[error("positive-definite factorization failed at jitter levels {levels:?}")]
    Factorization { levels: Vec<f64> },

    #[error("estimator error: {0}")]
    Estimator(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}

/// Checks length and finiteness of a point before it reaches a density.
pub(crate) fn check_point(x: &[f64], dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: x.len(),
        });
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    Ok(())
}
