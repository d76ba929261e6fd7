//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad dimensions, out-of-range values, unknown keys).
    #[error("configuration error: {0}")]
    Config(String),

    /// Runtime shape mismatch between tensors.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Checkpoint file is malformed or incompatible with the requested config.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Dataset discovery or decoding problems.
    #[error("data error: {0}")]
    Data(String),

    /// A loss or intermediate value became NaN/Inf during training.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Numeric contract violation (e.g. non-finite inputs to quantization).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
