//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument or configuration (CLI exit code 1).
    #[error("validation error: {0}")]
    Validation(String),

    /// Operation requested outside the regime where the underlying identity
    /// holds, e.g. a Hall inner product with `|lambda| > N`.
    #[error("regime violation: {0}")]
    Regime(String),

    /// Numerical failure: integrator step underflow, divergent iterates,
    /// failed factorizations (CLI exit code 2).
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn regime(msg: impl Into<String>) -> Self {
        Error::Regime(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
