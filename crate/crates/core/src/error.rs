use thiserror::Error;

/// Errors raised by the solvers and their input validation.
#[derive(Debug, Error)]
pub enum OtError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("refusing to materialize {entries} entries (cap is {cap})")]
    MaterializationTooLarge { entries: usize, cap: usize },

    #[error("numerical failure at iteration {iteration}: {what}")]
    NumericalFailure { iteration: usize, what: String },

    #[error("solver did not converge")]
    NotConverged,

    #[error("rank {rank} exceeds min(n, m) = {max}")]
    RankTooLarge { rank: usize, max: usize },

    #[error("problem of size {size} is too large for {what} (limit {limit})")]
    TooLarge {
        what: &'static str,
        size: usize,
        limit: usize,
    },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("outer iteration {outer_iteration}: {source}")]
    Outer {
        outer_iteration: usize,
        #[source]
        source: Box<OtError>,
    },
}

pub type Result<T, E = OtError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> OtError {
    OtError::InvalidInput(msg.into())
}
