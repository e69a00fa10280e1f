//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VoxError {
    /// Tensor shapes do not satisfy an operation's preconditions.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value is invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Caller misuse of an API contract (non-scalar loss, unnormalized
    /// probabilities, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// A binary file failed to parse; `offset` is the byte position at
    /// which the problem was detected.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// NaN/Inf encountered where finite values are required.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VoxError>;

impl VoxError {
    pub fn shape(msg: impl Into<String>) -> Self {
        VoxError::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        VoxError::Config(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        VoxError::Usage(msg.into())
    }
    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        VoxError::Format {
            offset,
            msg: msg.into(),
        }
    }
    pub fn numerical(msg: impl Into<String>) -> Self {
        VoxError::Numerical(msg.into())
    }
}
