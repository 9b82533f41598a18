use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library reports.
///
/// The variants map onto the CLI exit codes: [`Error::NumericalDomain`] is a
/// numerical failure, everything else is a configuration or validation problem.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("batch size error: {0}")]
    BatchSize(String),

    #[error("state error: {0}")]
    State(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NumericalDomain(_))
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}

macro_rules! format_err {
    ($($arg:tt)*) => { $crate::error::Error::Format(format!($($arg)*)) };
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}

macro_rules! validation_err {
    ($($arg:tt)*) => { $crate::error::Error::Validation(format!($($arg)*)) };
}

pub(crate) use config_err;
pub(crate) use format_err;
pub(crate) use shape_err;
pub(crate) use validation_err;
