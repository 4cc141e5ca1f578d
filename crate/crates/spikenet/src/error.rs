//! Error taxonomy shared by every module.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Failure categories surfaced by the library.
#[derive(Debug)]
pub enum Error {
    /// Tensor or parameter shapes do not line up.
    Dim(String),
    /// An operation was called in the wrong state (missing cache, unpopulated
    /// running statistics, already-fused checkpoint, ...).
    State(String),
    /// Invalid configuration value, unknown key, or unknown name.
    Config(String),
    /// Dataset-level problem (missing items, malformed events, label range).
    Data(String),
    /// Byte-level format violation while reading a file; carries the offset
    /// of the first bad byte.
    Format { offset: u64, msg: String },
    /// Network graph violation (cycle, dangling edge, untagged junction branch).
    Graph(String),
    /// Non-finite value where a finite one is required.
    Numeric(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim(msg) => write!(f, "dimension error: {msg}"),
            Error::State(msg) => write!(f, "state error: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Format { offset, msg } => {
                write!(f, "format error at byte {offset}: {msg}")
            }
            Error::Graph(msg) => write!(f, "graph error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
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
