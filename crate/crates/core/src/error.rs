use thiserror::Error;

#[derive(Debug, Error)]
pub enum PopiError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("policy is frozen and cannot be updated")]
    FrozenPolicy,
    #[error("enumeration too large: {size} sequences exceeds cap {cap}")]
    EnumerationTooLarge { size: u128, cap: usize },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PopiError>;

pub(crate) fn invalid(msg: impl Into<String>) -> PopiError {
    PopiError::InvalidInput(msg.into())
}
