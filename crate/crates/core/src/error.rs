use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    #[error("intrinsic period {period_secs}s is not an integer multiple of sampling interval {interval_secs}s")]
    NonIntegralCycle { interval_secs: f64, period_secs: f64 },

    #[error("corpus has no series long enough for a training window")]
    EmptyCorpus,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::InvalidDimension(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
