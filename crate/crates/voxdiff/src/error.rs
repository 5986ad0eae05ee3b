use thiserror::Error;

/// Error type shared across the engine.
#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's contract. The message
    /// names the offending axis or extent.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An argument was outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// A numeric failure: non-finite loss, NaN gradient, non-PSD covariance.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A data-level failure: malformed file, bad manifest, variant mismatch.
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArg(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
