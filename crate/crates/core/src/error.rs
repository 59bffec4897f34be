use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("manifest references missing files: {}", .missing.join(", "))]
    MissingFiles { missing: Vec<String> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("t must be in 1..{max}, got {t}")]
    Step { t: usize, max: usize },

    #[error("synthesis error: {0}")]
    Synth(String),

    #[error("non-finite loss at step {step}: offending batch ids {batch_ids:?}")]
    NonFinite { step: u64, batch_ids: Vec<String> },

    #[error("checkpoint load failed: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Data(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
