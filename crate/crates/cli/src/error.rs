use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: byte {offset}: {msg}", path.display())]
    Parse { path: PathBuf, offset: u64, msg: String },

    #[error(transparent)]
    Core(#[from] sslkit_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn parse(path: &Path, offset: u64, msg: impl Into<String>) -> Self {
        CliError::Parse {
            path: path.to_path_buf(),
            offset,
            msg: msg.into(),
        }
    }

    /// 1 config, 2 IO/parse, 3 numerical failure.
    pub fn exit_code(&self) -> u8 {
        use sslkit_core::Error as E;
        match self {
            CliError::Config(_) => 1,
            CliError::Io { .. } | CliError::Parse { .. } => 2,
            CliError::Core(E::Divergence { .. } | E::Correctness(_)) => 3,
            CliError::Core(_) => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
