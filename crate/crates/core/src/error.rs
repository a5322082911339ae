use thiserror::Error;

pub type Result<T> = std::result::Result<T, GiltError>;

#[derive(Debug, Error)]
pub enum GiltError {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("unsupported task level: {0}")]
    Unsupported(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl GiltError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        GiltError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
