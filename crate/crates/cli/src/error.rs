use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] notewise_core::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing input {}: run `notewise {producer}` first", path.display())]
    MissingInput { path: PathBuf, producer: &'static str },
    #[error("verification failed: {0}")]
    Verify(String),
    #[error("refusing to join runs: {0}")]
    Mismatch(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use notewise_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::Config { .. }) => 2,
            CliError::Core(E::Infeasible(_)) => 3,
            CliError::Verify(_) => 4,
            _ => 1,
        }
    }
}
