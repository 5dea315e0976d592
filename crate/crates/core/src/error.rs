use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid search space: {0}")]
    InvalidSpace(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid decomposition: {0}")]
    InvalidDecomposition(String),

    #[error("kernel matrix is ill-conditioned: Cholesky failed after jitter {jitter:e} (n = {n})")]
    Factorization { n: usize, jitter: f64 },

    #[error("model has not been fitted")]
    Unfitted,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("evaluation backend: {0}")]
    Backend(String),

    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
