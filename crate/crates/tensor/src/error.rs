use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numeric failure in {0}")]
    NumericFailure(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Shorthand for building an [`TensorError::InvalidArgument`].
pub fn invalid<S: Into<String>>(msg: S) -> TensorError {
    TensorError::InvalidArgument(msg.into())
}
