use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: `{key}`: {message}")]
    Config { key: String, message: String },

    /// Dataset, protocol, checkpoint or run-log content is unusable.
    #[error("data error: {0}")]
    Data(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn csv(path: impl AsRef<Path>, err: csv::Error) -> Self {
        match err.into_kind() {
            csv::ErrorKind::Io(e) => CliError::io(path, e),
            other => CliError::Data(format!("{}: {other:?}", path.as_ref().display())),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Data(_) => 3,
            CliError::Training(_) => 4,
            CliError::Io { .. } => 5,
        }
    }
}

impl From<poet_core::Error> for CliError {
    fn from(e: poet_core::Error) -> Self {
        use poet_core::Error as E;
        match e {
            E::Config { key, message } => CliError::Config { key, message },
            E::Io { path, source } => CliError::Io { path, source },
            e @ (E::Parse { .. } | E::Protocol(_) | E::Integrity(_)) => CliError::Data(e.to_string()),
            e @ (E::Diverged { .. } | E::Degenerate(_) | E::Contract(_)) => CliError::Training(e.to_string()),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
