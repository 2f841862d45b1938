//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum R3dmError {
    /// A user-supplied configuration value is invalid.
    #[error("configuration error: {0}")]
    Config(String),
    /// A documented API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

impl From<serde_json::Error> for R3dmError {
    fn from(e: serde_json::Error) -> Self {
        R3dmError::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, R3dmError>;
