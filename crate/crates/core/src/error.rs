use alloc::string::String;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Tensor shapes are incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A value lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// The caller violated an API precondition.
    #[error("usage error: {0}")]
    Usage(String),
    /// Input data failed validation.
    #[error("validation error: {0}")]
    Validation(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(alloc::format!($($arg)*)) };
}
macro_rules! usage_err {
    ($($arg:tt)*) => { $crate::error::Error::Usage(alloc::format!($($arg)*)) };
}
pub(crate) use dim_err;
pub(crate) use usage_err;
