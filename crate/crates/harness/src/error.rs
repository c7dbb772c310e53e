use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

/// Harness failures, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum HarnessError {
    /// Bad or inconsistent configuration (exit 2).
    #[error("config error: {0}")]
    Config(String),

    /// Something the command needs is missing or damaged (exit 3).
    #[error("{0}")]
    Precondition(String),

    /// A numerical failure during the run (exit 4).
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Precondition(_) | HarnessError::Io { .. } => 3,
            HarnessError::Numerical(_) => 4,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.to_path_buf(), source }
    }
}

impl From<kvlab_core::Error> for HarnessError {
    fn from(e: kvlab_core::Error) -> Self {
        use kvlab_core::Error as E;
        match e {
            E::Config(m) => HarnessError::Config(m),
            E::Format(m) => HarnessError::Precondition(format!("malformed file: {m}")),
            E::Io(e) => HarnessError::Precondition(e.to_string()),
            other => HarnessError::Numerical(other.to_string()),
        }
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        HarnessError::Precondition(format!("csv: {e}"))
    }
}

impl From<serde_json::Error> for HarnessError {
    fn from(e: serde_json::Error) -> Self {
        HarnessError::Precondition(format!("json: {e}"))
    }
}
