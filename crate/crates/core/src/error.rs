use alloc::string::String;
use core::fmt;

/// Crate-wide error type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Input data violates a precondition (empty, too short, non-finite).
    InvalidInput(String),
    /// Configuration value out of range or inconsistent.
    InvalidConfig(String),
    /// Dataset-level problem (missing label, malformed record).
    Data(String),
    /// Non-finite value produced during numeric computation.
    Numeric(String),
    /// Shape mismatch between arrays that must agree.
    Shape(String),
    /// Attention pooling over an all-invalid mask.
    EmptyPool,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidInput(m) => write!(f, "invalid input: {m}"),
            Error::InvalidConfig(m) => write!(f, "invalid config: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Numeric(m) => write!(f, "numeric failure: {m}"),
            Error::Shape(m) => write!(f, "shape mismatch: {m}"),
            Error::EmptyPool => write!(f, "attention pool: no valid positions"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
