//! Error type shared across the crate.

use std::fmt;
use std::io;

#[derive(Debug)]
pub enum Error {
    /// Shape or length mismatch between tensors/vectors.
    Dimension(String),
    /// Malformed input file (bad magic, truncation, ...).
    Format(String),
    /// Numerical failure (non-PD matrix, NaN loss, ...).
    Numeric(String),
    /// Invalid configuration value or key.
    Config(String),
    /// Training-time failure (divergence, stale cache).
    Train(String),
    Io(io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Train(m) => write!(f, "training error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

impl Error {
    /// Exit code the CLI maps this error to (usage/config errors are 2).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}
