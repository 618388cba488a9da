use std::path::PathBuf;

use thiserror::Error;

/// Process exit status for a successful run.
pub const EXIT_OK: i32 = 0;
/// Bad configuration, bad flags, unreadable input.
pub const EXIT_CONFIG: i32 = 1;
/// A numerical check or solver contract failed.
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error(transparent)]
    Model(#[from] supermarket::Error),
    #[error("check failed: {0}")]
    Contract(String),
}

impl HarnessError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use supermarket::Error as E;
        match self {
            Self::Config(_) | Self::Io { .. } | Self::Parse { .. } => EXIT_CONFIG,
            Self::Model(E::Domain(_) | E::LengthMismatch { .. } | E::InvalidState(_) | E::Config(_)) => {
                EXIT_CONFIG
            }
            Self::Model(_) | Self::Contract(_) => EXIT_NUMERICAL,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
