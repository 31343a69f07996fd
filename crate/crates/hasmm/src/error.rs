//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by model construction, table building, filtering,
/// sampling, and persistence.
#[derive(Debug, Error)]
pub enum Error {
    /// Parameter values violate a documented invariant.
    #[error("invalid parameter set: {0}")]
    InvalidParameter(String),

    /// Input data violates a precondition (out-of-order times, bad label, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A persisted file does not parse or fails structural checks.
    #[error("malformed file: {0}")]
    MalformedFile(String),

    /// A table was built from a different parameter set than the one supplied.
    #[error("fingerprint mismatch: table was built from a different parameter set (expected {expected}, found {found})")]
    FingerprintMismatch { expected: String, found: String },

    /// An iterative solver failed to reach its tolerance.
    #[error("did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    /// A rejection sampler hit its proposal budget.
    #[error("sampler stalled: {0}")]
    SamplerStalled(String),

    /// Forward filtering lost all probability mass.
    #[error("filter degenerated at step {step}: {reason}")]
    FilterDegenerate { step: usize, reason: String },

    /// Combinatorial oracle exceeded its enumeration budget.
    #[error("enumeration budget exceeded: {0}")]
    BudgetExceeded(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
