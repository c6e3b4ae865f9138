//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's preconditions (shapes, ranges, flags).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An input lies outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// An observation is not in the image of the forward process.
    #[error("not in the image of the forward process: padding deviates by {deviation:.3e}")]
    NotInImage { deviation: f64 },

    /// The query budget is exhausted.
    #[error("query budget exhausted: used {used} of {budget}")]
    BudgetExhausted { used: u64, budget: u64 },

    /// A Jacobian is rank-deficient where full rank is required.
    #[error("rank-deficient jacobian: smallest singular value {sigma_min:.3e}")]
    DegenerateJacobian { sigma_min: f64 },

    /// A computation produced or received a non-finite value.
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    /// A persisted document declares an unsupported format version.
    #[error("format version mismatch: document has {found}, this build expects {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    /// A persisted document cannot be parsed.
    #[error("malformed document: {0}")]
    Malformed(String),

    /// A persisted document parses but its dimensions are inconsistent.
    #[error("dimension mismatch in document: {0}")]
    DimensionMismatch(String),

    /// Filesystem failure while reading or writing an artifact.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
