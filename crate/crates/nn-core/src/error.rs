use thiserror::Error;

/// Errors raised by tensor and network operations.
#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch at {layer}: {message}")]
    ShapeMismatch { layer: String, message: String },

    #[error("invalid layer or tensor specification: {0}")]
    InvalidSpec(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("backward pass does not match the cached forward pass: {0}")]
    MismatchedBackward(String),
}

pub type Result<T> = std::result::Result<T, NnError>;
