use alloc::string::String;
use core::fmt;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Shapes or lengths disagree with what an operation requires.
    Contract(String),
    /// An argument lies outside the mathematical domain of the operation.
    Domain(String),
    /// A NaN or infinity appeared where a finite value is required.
    Numeric(String),
    /// The requested configuration is valid in principle but not implemented.
    Unsupported(String),
    /// A serialized artifact could not be decoded.
    Format(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Unsupported(m) => write!(f, "unsupported configuration: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! contract {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err($crate::Error::Contract(alloc::format!($($arg)*)));
        }
    };
}
pub(crate) use contract;
