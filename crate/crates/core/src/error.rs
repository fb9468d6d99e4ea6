use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TadError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TadError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A loaded or constructed value violates one of its type invariants.
    #[error("validation failed for {field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("clip {clip_id} contains anomalous frames and cannot be used for training")]
    AnomalousTrainingClip { clip_id: String },

    #[error("labels contain a single class; AUC is undefined")]
    SingleClass,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("plot rendering failed: {0}")]
    Image(#[from] image::ImageError),
}

impl TadError {
    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
