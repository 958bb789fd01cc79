use thiserror::Error;

/// Errors raised across the crate.
///
/// The variants map onto the failure classes the CLI distinguishes by exit
/// code: configuration, numeric, contract and I/O.
#[derive(Debug, Error)]
pub enum KorrError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, KorrError>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::KorrError::Dimension(format!($($arg)*)) };
}
macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::KorrError::Contract(format!($($arg)*)) };
}
macro_rules! numeric_err {
    ($($arg:tt)*) => { $crate::error::KorrError::Numeric(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::KorrError::Config(format!($($arg)*)) };
}
pub(crate) use {config_err, contract_err, dim_err, numeric_err};
