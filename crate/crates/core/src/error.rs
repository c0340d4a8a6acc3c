use std::path::PathBuf;

use thiserror::Error;

use crate::ingest::IngestError;
use crate::synth::SynthError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline-level failures. Per-user problems never surface here; they are
/// recorded as drops in the course report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Ingest(#[from] IngestError),

    #[error(transparent)]
    Synth(#[from] SynthError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by bad configuration or malformed inputs
    /// rather than the filesystem.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Synth(_) | Error::Json(_) => true,
            Error::Ingest(e) => e.is_config(),
            Error::Csv(e) => !e.is_io_error(),
            Error::Io { .. } => false,
        }
    }
}
