use std::path::PathBuf;

use thiserror::Error;

/// Command failures, each with a stable process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    Missing(String),
    #[error("incompatible inputs: {0}")]
    Incompatible(String),
    #[error("corrupt or missing artifacts:\n{}", .0.iter().map(|f| format!("  {}", f.display())).collect::<Vec<_>>().join("\n"))]
    Corrupt(Vec<PathBuf>),
    #[error(transparent)]
    Core(#[from] selfkd_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Incompatible(_) => 4,
            CliError::Corrupt(_) => 5,
            CliError::Core(selfkd_core::Error::Config { .. }) => 2,
            CliError::Core(_) | CliError::Io { .. } => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
