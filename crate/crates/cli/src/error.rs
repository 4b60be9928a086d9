use std::io;
use std::path::{Path, PathBuf};

use monotone_pwl::data::DataError;
use monotone_pwl::loss::LossError;
use monotone_pwl::metrics::MetricsError;
use monotone_pwl::model::ModelError;
use monotone_pwl::trainer::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Io { .. } => 4,
        }
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Attaches `path` to I/O errors that carry no location of their own.
    pub fn at(self, path: &Path) -> Self {
        match self {
            CliError::Io { path: p, source } if p.as_os_str().is_empty() => {
                CliError::io(path, source)
            }
            other => other,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { path, source } => CliError::Io { path, source },
            DataError::Csv(c) if c.is_io_error() => CliError::Io {
                path: PathBuf::new(),
                source: io::Error::other(c.to_string()),
            },
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(source) => CliError::Io {
                path: PathBuf::new(),
                source,
            },
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Validation(e.to_string())
    }
}
