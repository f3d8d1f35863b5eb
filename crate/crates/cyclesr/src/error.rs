//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor dimensions do not satisfy an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument is outside its legal range (stride 0, negative scale, ...).
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// A numeric contract was violated (NaN/Inf produced, log of non-positive ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A serialized artifact (checkpoint, config, image file) is malformed.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
