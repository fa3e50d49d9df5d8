use std::fmt;

/// Errors surfaced by the library.
#[derive(Debug)]
pub enum Error {
    /// Tensor or parameter shapes are incompatible for the requested operation.
    ShapeMismatch(String),
    /// A configuration or argument violates a documented precondition.
    InvalidArgument(String),
    /// A gradient or loss became NaN/inf; the payload names the offender.
    NonFinite(String),
    /// Rejection sampling ran out of retries for the requested patch class.
    SamplingBudget(String),
    /// A serialized file (checkpoint, PGM, manifest, preset) is malformed.
    Format(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::SamplingBudget(msg) => write!(f, "sampling budget exhausted: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
