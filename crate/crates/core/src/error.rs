use thiserror::Error;

/// Errors produced by the penalty kernel, problem model, solver and oracles.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    /// The problem description is internally inconsistent.
    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    /// The incremental iteration produced a non-finite iterate.
    #[error("iterate diverged at k={k}: |x|={iterate_norm:e}, |direction|={direction_norm:e}")]
    Divergence {
        k: u64,
        iterate_norm: f64,
        direction_norm: f64,
    },

    /// A reference solver could not certify its answer.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Active-set enumeration is only offered for small constraint counts.
    #[error("oracle refuses m={m} constraints (limit {limit})")]
    TooManyConstraints { m: usize, limit: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
