use std::io;
use std::path::PathBuf;

use crate::checkpoint::CheckpointError;
use crate::cifar::CifarError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Process exit code for configuration problems.
pub const EXIT_CONFIG: i32 = 2;
/// Process exit code for failures while running.
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A bad or missing configuration value; `key` is its dotted path.
    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error(transparent)]
    Core(#[from] orthosphere_core::Error),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error(transparent)]
    Cifar(#[from] CifarError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("{0}")]
    Format(String),
}

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { key: key.into(), msg: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// 2 for configuration errors, 3 for everything else.
    pub fn exit_code(&self) -> i32 {
        use orthosphere_core::Error as E;
        match self {
            Error::Config { .. } => EXIT_CONFIG,
            Error::Core(E::Config(_) | E::Partition { .. }) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        }
    }
}
