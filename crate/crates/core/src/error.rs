//! Crate-wide error type.

/// Convenience alias used by every fallible operation in the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("syntax error at byte {position}: {message}")]
    Syntax { position: usize, message: String },

    #[error("time {0} is not a partition point")]
    UnknownTime(f64),

    #[error("increment index {index} is outside 1..={max}")]
    UnknownIncrement { index: usize, max: usize },

    #[error("series with exponent {0} diverges (requires exponent > 1)")]
    DivergentSeries(f64),

    #[error("CFL violation: {0}")]
    CflViolation(String),

    #[error("solution left the finite range: {0}")]
    NonFinite(String),

    #[error("point outside grid domain: {0}")]
    OutOfDomain(String),

    #[error("stage dimension {got} exceeds the supported maximum {max}")]
    TooManyStages { got: usize, max: usize },

    #[error("missing interval slabs: {0}")]
    MissingSlabs(String),

    #[error("excluded-path fraction {fraction:.6} exceeds the limit {limit}")]
    ExcludedPaths { fraction: f64, limit: f64 },

    #[error("exponent constraint violated: {0}")]
    ExponentConstraint(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}
