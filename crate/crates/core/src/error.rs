//! Crate-wide error type.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible for the attempted operation.
    ShapeMismatch {
        ctx: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    /// An argument violated a precondition (bad step index, negative gamma, ...).
    InvalidArg(String),
    /// An operation produced a NaN or infinity.
    NonFinite { op: &'static str },
    /// Both posterior channels vanished at the given pixel; valid schedules
    /// cannot reach this, so it signals a bug upstream.
    ZeroNormalizer { row: usize, col: usize, chan: usize },
    Io(std::io::Error),
    /// Malformed tensor file, checkpoint or dataset index.
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { ctx, expected, got } => {
                write!(f, "{ctx}: shape mismatch, expected {expected:?}, got {got:?}")
            }
            Error::InvalidArg(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonFinite { op } => write!(f, "non-finite value produced by `{op}`"),
            Error::ZeroNormalizer { row, col, chan } => write!(
                f,
                "posterior normalizer is zero at pixel ({row}, {col}, {chan})"
            ),
            Error::Io(e) => write!(f, "i/o error: {e}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub(crate) fn invalid_arg(msg: impl Into<String>) -> Error {
    Error::InvalidArg(msg.into())
}
