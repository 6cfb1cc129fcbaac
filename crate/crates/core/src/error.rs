//! Error type shared across the crate.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Dimension mismatch in a matrix or model operation.
    Shape { op: &'static str, detail: String },
    /// A softmax row with no finite entry.
    InvalidRow { row: usize },
    /// Bad configuration value or unknown key.
    Config(String),
    /// Bad runtime input (out-of-vocabulary token, malformed file, ...).
    Input(String),
    /// Non-finite value produced where a finite one is required.
    Numeric(String),
    /// Training failure (diverged loss, non-finite gradient).
    Training { step: usize, detail: String },
    /// Evaluation protocol violation (e.g. class-count mismatch in transfer).
    Protocol(String),
    /// Operation not supported for this model kind.
    Unsupported(String),
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::InvalidRow { row } => {
                write!(f, "invalid row {row}: no finite entry to normalize")
            }
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Input(msg) => write!(f, "input error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Training { step, detail } => write!(f, "training error at step {step}: {detail}"),
            Error::Protocol(msg) => write!(f, "protocol error: {msg}"),
            Error::Unsupported(msg) => write!(f, "unsupported: {msg}"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
