use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("invalid config field {field}: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error(transparent)]
    Core(sharc::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn from_io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingFile(path.to_owned())
        } else {
            CliError::Io { path: path.to_owned(), source }
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingFile(_) => 2,
            CliError::InvalidConfig { .. } => 3,
            _ => 1,
        }
    }
}

impl From<sharc::Error> for CliError {
    fn from(e: sharc::Error) -> Self {
        match e {
            sharc::Error::Io { path, source } => CliError::from_io(&path, source),
            other => CliError::Core(other),
        }
    }
}
