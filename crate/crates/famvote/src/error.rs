//! Error types shared across the toolkit.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FamvoteError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("usage error: {0}")]
    Usage(String),
}

impl FamvoteError {
    pub fn validation(msg: impl Into<String>) -> Self {
        FamvoteError::Validation(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        FamvoteError::Contract(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        FamvoteError::Usage(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, FamvoteError>;
