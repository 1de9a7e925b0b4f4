//! Crate-wide error type.

use std::fmt;
use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
///
/// Container validation failures (`MissingArray`, `ShapeMismatch`,
/// `ChecksumMismatch`) are kept as distinct variants so callers can tell a
/// truncated download from a corrupted one.
#[derive(Debug)]
pub enum Error {
    /// An operation precondition was violated (bad argument, out-of-range
    /// ratio, invalid index).
    Precondition(String),
    /// Two pieces of the pipeline disagree about an internal contract
    /// (dimension mismatch, plan/tensor count mismatch).
    Contract(String),
    /// Invalid configuration file or flag combination.
    Config(String),
    /// Input degenerated to something the operation cannot act on
    /// (e.g. every patch dropped).
    Degenerate(String),
    /// A required array is absent from a container manifest.
    MissingArray(String),
    /// An array's stored shape disagrees with the expected shape.
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    /// An array file's CRC32 does not match the manifest.
    ChecksumMismatch { name: String },
    /// A container file or directory is missing.
    MissingFile(PathBuf),
    /// The training loss became non-finite; a diagnostic snapshot of the
    /// offending batch is written next to the run outputs.
    NonFiniteLoss { step: u64, detail: String },
    /// A probe class is absent from the training split.
    Stratification(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Precondition(msg) => write!(f, "precondition violated: {msg}"),
            Error::Contract(msg) => write!(f, "contract violated: {msg}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Degenerate(msg) => write!(f, "degenerate input: {msg}"),
            Error::MissingArray(name) => write!(f, "container is missing array '{name}'"),
            Error::ShapeMismatch {
                name,
                expected,
                actual,
            } => write!(
                f,
                "array '{name}' has shape {actual:?}, expected {expected:?}"
            ),
            Error::ChecksumMismatch { name } => {
                write!(f, "array '{name}' failed its CRC32 integrity check")
            }
            Error::MissingFile(path) => write!(f, "missing file: {}", path.display()),
            Error::NonFiniteLoss { step, detail } => {
                write!(f, "non-finite loss at step {step}: {detail}")
            }
            Error::Stratification(msg) => write!(f, "stratification error: {msg}"),
            Error::Io(err) => write!(f, "i/o error: {err}"),
            Error::Json(err) => write!(f, "json error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            Error::Json(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Json(err)
    }
}
