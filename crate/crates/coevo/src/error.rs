use std::path::{Path, PathBuf};

use thiserror::Error;

/// Failures surfaced by the harness, grouped by the exit code they map to.
#[derive(Debug, Error)]
pub enum HarnessError {
    /// Bad configuration: unknown key, unparsable value, inconsistent sizes.
    #[error("config error: {0}")]
    Config(String),
    /// Bad or missing input data.
    #[error("data error: {0}")]
    Data(String),
    /// A file could not be read or written.
    #[error("{}: {err}", path.display())]
    Io { path: PathBuf, err: std::io::Error },
    /// A runtime check on the model or index failed.
    #[error("invariant violated: {0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    /// Process exit status: 1 config, 2 data, 3 invariant.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Data(_) | HarnessError::Io { .. } => 2,
            HarnessError::Invariant(_) => 3,
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        HarnessError::Io { path: path.to_path_buf(), err }
    }

    /// Classifies a compute-core error raised while processing inputs:
    /// bad ids and shapes are data errors, everything else is an
    /// invariant break.
    pub fn from_core(err: coevo_core::Error) -> Self {
        use coevo_core::Error as E;
        match err {
            E::Shape(_) | E::OutOfRange { .. } | E::UnknownItem(_) | E::MissingSid(_) => {
                HarnessError::Data(err.to_string())
            }
            E::NonFinite(_) | E::TimeRegression { .. } | E::Invalid(_) => HarnessError::Invariant(err.to_string()),
        }
    }
}

pub(crate) fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| HarnessError::io(path, e))
}
