use std::path::{Path, PathBuf};

use thiserror::Error;

/// Every failure the command line can report, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Format(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingInput(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Format(_) | CliError::Io { .. } => 1,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingInput(path.to_path_buf())
        } else {
            CliError::Io { path: path.to_path_buf(), source }
        }
    }
}

impl From<getzero_core::trainer::TrainError> for CliError {
    fn from(e: getzero_core::trainer::TrainError) -> Self {
        use getzero_core::trainer::TrainError;
        match e {
            TrainError::NonFiniteLoss { .. } | TrainError::Numerics(_) => CliError::Numerical(e.to_string()),
            TrainError::Model(_) => CliError::Config(e.to_string()),
            _ => CliError::Format(e.to_string()),
        }
    }
}

impl From<getzero_core::bench::BenchError> for CliError {
    fn from(e: getzero_core::bench::BenchError) -> Self {
        CliError::Config(e.to_string())
    }
}
