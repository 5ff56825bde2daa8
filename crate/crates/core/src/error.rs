//! Error types shared across the crate.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Top-level error for every fallible operation in this crate.
#[derive(Debug)]
pub enum Error {
    /// A shape, channel, kernel or alignment constraint was violated when
    /// configuring an operation or a model.
    Config(String),
    /// An operation was called in a way its contract forbids (for example
    /// `backward` on a non-scalar).
    Usage(String),
    /// Two models or checkpoints cannot be matched for weight transfer.
    Compatibility(String),
    /// Synthetic data generation could not satisfy its constraints.
    Generation(String),
    /// Training aborted (for example a NaN loss).
    Train(String),
    /// A checkpoint or volume file failed to load or validate.
    Checkpoint(CheckpointError),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

/// Distinct failure modes when reading a checkpoint or volume file.
#[derive(Debug)]
pub enum CheckpointError {
    BadMagic { expected: &'static str, found: Vec<u8> },
    UnsupportedVersion(u16),
    Truncated { context: &'static str },
    DuplicateName(String),
    UnsortedNames { previous: String, current: String },
    BadDtype(u8),
    BadMetadata(String),
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::Compatibility(msg) => write!(f, "compatibility error: {msg}"),
            Error::Generation(msg) => write!(f, "generation error: {msg}"),
            Error::Train(msg) => write!(f, "training error: {msg}"),
            Error::Checkpoint(err) => write!(f, "checkpoint error: {err}"),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::BadMagic { expected, found } => {
                write!(f, "bad magic, expected {expected:?}, found {found:?}")
            }
            CheckpointError::UnsupportedVersion(v) => write!(f, "unsupported version {v}"),
            CheckpointError::Truncated { context } => write!(f, "file truncated while reading {context}"),
            CheckpointError::DuplicateName(name) => write!(f, "duplicate tensor name {name:?}"),
            CheckpointError::UnsortedNames { previous, current } => {
                write!(f, "tensor names out of order: {current:?} after {previous:?}")
            }
            CheckpointError::BadDtype(code) => write!(f, "unknown dtype code {code}"),
            CheckpointError::BadMetadata(msg) => write!(f, "invalid metadata block: {msg}"),
            CheckpointError::ShapeMismatch { name, expected, found } => {
                write!(f, "tensor {name:?} has shape {found:?}, expected {expected:?}")
            }
        }
    }
}

impl std::error::Error for Error {}
impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

impl From<CheckpointError> for Error {
    fn from(err: CheckpointError) -> Self {
        Error::Checkpoint(err)
    }
}
