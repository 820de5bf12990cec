use std::path::Path;

use debias_core::error::DebiasError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] DebiasError),
}

impl CliError {
    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Prefixes input errors with the file they came from.
    pub fn in_file(self, path: &Path) -> Self {
        match self {
            CliError::Input(msg) => CliError::Input(format!("{}: {msg}", path.display())),
            CliError::Core(e) if !e.is_numerical() => CliError::Input(format!("{}: {e}", path.display())),
            other => other,
        }
    }

    /// 3 for bad input or configuration, 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 4,
            _ => 3,
        }
    }
}
