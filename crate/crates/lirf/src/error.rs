use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LirfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LirfError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("no eligible neighbors")]
    NoEligibleNeighbors,

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("zero-distance pair at index {0}: ratio undefined")]
    ZeroDistancePair(usize),

    #[error("label class {label} has {size} members, need at least {needed}")]
    ClassTooSmall {
        label: i64,
        size: usize,
        needed: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("malformed {what}: {reason}")]
    Format { what: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("frozen model was modified (checksum {expected:016x} != {actual:016x})")]
    FrozenModified { expected: u64, actual: u64 },
}

impl LirfError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LirfError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: impl Into<String>, reason: impl Into<String>) -> Self {
        LirfError::Format {
            what: what.into(),
            reason: reason.into(),
        }
    }
}
