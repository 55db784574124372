use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("height {height} is not divisible into {strips} strips")]
    InvalidBinning { height: usize, strips: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("pyramid aggregation needs exactly {expected} frames, got {found}")]
    InvalidFrameCount { expected: usize, found: usize },
    #[error("gamma {0} outside [0, 1]")]
    InvalidGamma(f64),
    #[error("pseudo-video frames come from different subjects: {0} and {1}")]
    SubjectMismatch(String, String),
    #[error("corrupt file {path}: {reason}")]
    CorruptIndex { path: PathBuf, reason: String },
    #[error("score matrices are not aligned: {0}")]
    AlignmentError(String),
    #[error("queries without any correct gallery match: {0:?}")]
    UnmatchableQuery(Vec<String>),
    #[error("label {label} out of range for {classes} classes")]
    IndexError { label: usize, classes: usize },
    #[error("training diverged at step {0}")]
    TrainingDiverged(usize),
    #[error("protocol error: {0}")]
    ProtocolError(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::CorruptIndex { path: path.into(), reason: reason.into() }
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimMismatch { expected, found })
    }
}
