//! Crate-wide error type with exit-code categories for the CLI.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/raster shape disagreement.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid argument or configuration value.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// NaN/Inf encountered where a finite value is required. Aborts the
    /// surrounding step rather than propagating silently.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A tape can only be walked backward once.
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    /// Problems with input data (datasets, masks, series).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed on-disk container (raster file, checkpoint).
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// CLI exit code: 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArg(_) => 1,
            Error::NonFinite(_) => 3,
            Error::Shape(_)
            | Error::TapeConsumed
            | Error::Data(_)
            | Error::Format(_)
            | Error::Io(_) => 2,
        }
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn arg_err(msg: impl Into<String>) -> Error {
    Error::InvalidArg(msg.into())
}

pub(crate) fn data_err(msg: impl Into<String>) -> Error {
    Error::Data(msg.into())
}
