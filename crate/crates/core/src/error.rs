use thiserror::Error;

/// Errors raised anywhere in the synthesis stack.
#[derive(Debug, Error)]
pub enum CastError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("pair not producible: {0}")]
    Unsplittable(String),

    #[error("undefined similarity: {0}")]
    UndefinedSimilarity(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CastError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(CastError::InvalidArgument(msg.into()))
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CastError::Shape(msg.into()))
}
