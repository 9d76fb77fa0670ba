//! Crate-wide error type. Fallible surfaces (I/O, config validation, schema checks)
//! return `Result<T, TapError>`; numeric code panics only on programmer errors
//! (shape mismatches are bugs, not runtime conditions).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed IDX file {path}: {reason}")]
    Idx { path: String, reason: String },

    #[error("malformed CSV file {path}: {reason}")]
    Csv { path: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset shape violation: {0}")]
    Data(String),

    #[error("serialization error: {0}")]
    Serde(String),

    #[error("numeric abort: {0}")]
    Numeric(String),
}

impl TapError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        TapError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn idx(path: impl Into<String>, reason: impl Into<String>) -> Self {
        TapError::Idx {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn csv(path: impl Into<String>, reason: impl Into<String>) -> Self {
        TapError::Csv {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, TapError>;
