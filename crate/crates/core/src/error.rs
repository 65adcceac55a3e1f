use thiserror::Error;

/// Errors produced by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum D2rError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("model not trained: {0}")]
    Untrained(String),
}

impl D2rError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        D2rError::Invalid(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        D2rError::Shape(msg.into())
    }
    pub fn index(msg: impl Into<String>) -> Self {
        D2rError::Index(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, D2rError>;
