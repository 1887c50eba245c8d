use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes; the CLI maps them onto exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("unknown {what} `{value}`")]
    UnknownMode { what: &'static str, value: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format version mismatch at line {line}: file has \"{found}\", reader supports \"{supported}\"")]
    Version {
        line: usize,
        found: String,
        supported: &'static str,
    },

    #[error("malformed record at line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("no shot boundaries with valid frames on both sides")]
    NoShotBoundaries,

    #[error("empty evaluation set")]
    EmptyEvaluation,

    #[error("no valid frames")]
    NoValidFrames,

    #[error("ground truth required but missing (frame {frame})")]
    MissingGroundTruth { frame: usize },

    #[error("degenerate point set: {0}")]
    Degenerate(&'static str),

    #[error("non-finite energy at frame {frame}")]
    NonFiniteEnergy { frame: usize },

    #[error("non-finite loss in batch {batch} of epoch {epoch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::UnknownMode { .. } => ErrorClass::Usage,
            Error::NonFiniteEnergy { .. } | Error::NonFiniteLoss { .. } => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }
}
