use thiserror::Error;

/// Errors raised anywhere in the restoration stack.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A configuration value violates a structural constraint.
    #[error("config error: {0}")]
    Config(String),
    /// Input data (labels, files) is malformed or out of range.
    #[error("data error: {0}")]
    Data(String),
    /// An API was called in a way it does not support.
    #[error("usage error: {0}")]
    Usage(String),
    /// NaN or infinite values appeared during optimization.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// Broken internal invariant.
    #[error("internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}

pub(crate) use config_err;
pub(crate) use dim_err;
