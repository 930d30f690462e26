use thiserror::Error;

use crate::io::FormatError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    /// Orthogonal merging requires the keep rates to fit into one unit of capacity.
    #[error("constraint violation: sum of keep rates Σ(1-p) = {keep_sum} exceeds 1")]
    ConstraintViolation { keep_sum: f64 },

    /// Partition checks need keep rates that sum to exactly one.
    #[error("keep rates sum to {keep_sum}, not 1")]
    NotSaturated { keep_sum: f64 },

    #[error("need at least {required} pooled draws, got {actual}")]
    InsufficientSamples { required: u64, actual: u64 },

    #[error("merge plan has no adapters")]
    EmptyPlan,

    #[error("invalid dropout rate p[{index}] = {rate}: {reason}")]
    InvalidRate {
        index: usize,
        rate: f64,
        reason: &'static str,
    },

    #[error("invalid adapter '{name}': {reason}")]
    InvalidAdapter { name: String, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Format(#[from] FormatError),
}

impl Error {
    pub(crate) fn dims(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            actual,
        }
    }
}
