use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor extent does not match what the operation requires.
    #[error("{op}: dimension mismatch on axis {axis}: expected {expected}, found {found}")]
    Dimension {
        op: &'static str,
        axis: usize,
        expected: usize,
        found: usize,
    },

    #[error("{op}: expected rank {expected}, found shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Broadcast {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("batchnorm: statistics over a single element per channel (shape {shape:?}, reduce axes {axes:?})")]
    DegenerateStatistics { shape: Vec<usize>, axes: Vec<usize> },

    #[error("orientation mismatch: {what} has N={found}, expected N={expected}")]
    OrientationMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("backward: loss must be a scalar, found shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape: variable does not belong to this tape")]
    ForeignVar,

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Path { path: PathBuf, source: io::Error },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Wraps an io error with the path it concerns.
    pub fn at(path: &Path) -> impl FnOnce(io::Error) -> Self + '_ {
        move |source| Error::Path {
            path: path.to_path_buf(),
            source,
        }
    }
}
