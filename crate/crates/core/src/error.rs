use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    /// Non-finite voxels found while loading an image.
    #[error("sanitation error: {count} non-finite voxel(s) in {path}")]
    Sanitation { path: PathBuf, count: usize },

    #[error("geometry error: {0}")]
    Geometry(String),

    /// A caller broke an operation's precondition (shape mismatch, label out of range, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint version {found} is not readable by this build (expected {expected}); re-export it with a matching release")]
    Migration { found: u32, expected: u32 },

    #[error("class-count mismatch: checkpoint has {found} output classes, pipeline expects {expected} (use swap_head)")]
    ClassMismatch { found: usize, expected: usize },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input or configuration rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config(_)
            | Error::Contract(_)
            | Error::ClassMismatch { .. }
            | Error::Geometry(_) => true,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
