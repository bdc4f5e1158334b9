//! Crate-wide error type.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A file could not be parsed into the expected schema.
    #[error("parse error: {0}")]
    Parse(String),

    /// Input data violates a dataset or parameter invariant. The message
    /// names the offending instance and/or annotator where applicable.
    #[error("validation error: {0}")]
    Validation(String),

    /// Dimensions of inputs do not agree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A numeric operation failed (singular system, non-PSD covariance, ...).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
