//! Error types shared across the engine.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, AsclError>;

/// All failure modes surfaced by the engine.
#[derive(Debug, Error)]
pub enum AsclError {
    /// Matrix or vector dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeError(String),

    /// A vector with zero norm was fed into a cosine-style computation.
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    /// An input is too small or otherwise unusable for the requested operation.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    ConfigError(String),

    /// A computation produced or encountered a non-finite value.
    #[error("numeric error: {0}")]
    NumericError(String),

    /// A serialized artifact is malformed; `offset` is the byte position of the fault.
    #[error("format error at byte {offset}: {message}")]
    FormatError { offset: u64, message: String },

    /// Two samples that must share a parent image do not.
    #[error("pairing error: {0}")]
    PairingError(String),

    /// An operation was invoked without the state it depends on.
    #[error("state error: {0}")]
    StateError(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl AsclError {
    pub fn shape(msg: impl Into<String>) -> Self {
        AsclError::ShapeError(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        AsclError::ConfigError(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        AsclError::FormatError {
            offset,
            message: msg.into(),
        }
    }
}
