use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Errors raised by the compute core.
///
/// Every variant is a rejected input or a detected invariant break; none of
/// them are retried internally.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Shapes of two operands do not conform.
    Shape(String),
    /// A token, row or item index is outside its valid range.
    OutOfRange { what: &'static str, index: usize, bound: usize },
    /// A value that must be finite is NaN or infinite.
    NonFinite(String),
    /// An item id is not registered with the component.
    UnknownItem(u32),
    /// A history item has no SID in the beam index.
    MissingSid(u32),
    /// Logical time went backwards.
    TimeRegression { now: u64, clock: u64 },
    /// Any other precondition failure.
    Invalid(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Error::OutOfRange { what, index, bound } => {
                write!(f, "{what} {index} out of range (bound {bound})")
            }
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::UnknownItem(id) => write!(f, "unknown item {id}"),
            Error::MissingSid(id) => write!(f, "item {id} has no SID in the index"),
            Error::TimeRegression { now, clock } => {
                write!(f, "time regression: now {now} < clock {clock}")
            }
            Error::Invalid(msg) => f.write_str(msg),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
