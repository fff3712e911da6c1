use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node}: {detail}")]
    ShapeMismatch { node: usize, detail: String },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: String },
    #[error("graph has not been evaluated")]
    NotEvaluated,
    #[error("backward pass requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("gradient mode {0} is not supported by defense {1}")]
    UnsupportedGradientMode(String, String),
    #[error("checkpoint digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
