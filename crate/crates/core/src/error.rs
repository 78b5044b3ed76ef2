use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value. `key` names the offending field.
    #[error("configuration error: `{key}`: {message}")]
    Config { key: String, message: String },

    /// A caller violated an operation's shape or range contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Cosine similarity is undefined for a zero-norm vector.
    #[error("numeric degeneracy: {0}")]
    Degenerate(String),

    /// Session class sets overlap, or a sample carries a class outside its session.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Skeleton text file could not be parsed.
    #[error("parse error in {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// Non-finite loss during optimization.
    #[error("training diverged at step {step} (session {session}): loss = {loss}")]
    Diverged { session: usize, step: usize, loss: f64 },

    /// Checkpoint archive is malformed or a blob disagrees with the manifest.
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn contract(message: impl Into<String>) -> Self {
        Error::Contract(message.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
