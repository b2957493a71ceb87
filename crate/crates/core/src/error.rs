use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the reconstruction pipeline and its stages.
#[derive(Error, Debug)]
pub enum Error {
    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// Input violates a structural precondition (non-tree graph, mismatched dimensions).
    #[error("structural error: {0}")]
    Structure(String),

    /// An operation was called with arguments it cannot work with (empty lists, count mismatch).
    #[error("usage error: {0}")]
    Usage(String),

    /// A file could not be parsed.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    /// No voxel carries enough weight to seed or root the particle flow.
    #[error("empty volume: {0}")]
    EmptyVolume(String),

    /// The flow or refinement stages could not produce a rooted skeleton.
    #[error("reconstruction failed: {0}")]
    ReconstructionFailed(String),

    /// A file named in a configuration does not exist or could not be opened.
    #[error("cannot read `{}`: {source}", path.display())]
    MissingFile {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    /// A pipeline stage failed; wraps the stage's own error.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn format(offset: usize, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }

    /// Tags the error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
