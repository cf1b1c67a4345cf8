//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by channel synthesis, covariance modeling and codecs.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter is outside its documented domain.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Vector or matrix dimensions do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A matrix that must be positive semidefinite is not, beyond tolerance.
    #[error("matrix is not positive semidefinite: smallest eigenvalue {min_eigenvalue:.3e}")]
    NotPositiveSemidefinite { min_eigenvalue: f64 },

    /// A dense-only operation was requested above the materialization guard.
    #[error("dimension {n} exceeds the dense materialization threshold {threshold}")]
    DenseThresholdExceeded { n: usize, threshold: usize },

    /// A codec operation needed context that was not supplied.
    #[error("missing context: {0}")]
    MissingContext(String),

    /// Malformed serialized data (covariance file or feedback frame).
    #[error("malformed data: {0}")]
    MalformedData(String),
}

pub type Result<T> = std::result::Result<T, Error>;
