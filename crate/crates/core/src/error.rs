use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = VadError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum VadError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite values: {0}")]
    NonFinite(String),
    #[error("dataset invariant violated: {0}")]
    Dataset(String),
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("refusing to overwrite {} without force", .0.display())]
    AlreadyExists(PathBuf),
    #[error("corrupt file {}: {reason}", .path.display())]
    Corrupt { path: PathBuf, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("image: {0}")]
    Image(String),
}

impl VadError {
    /// Stable machine-readable identifier for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            VadError::Shape(_) => "shape_mismatch",
            VadError::InvalidArgument(_) => "invalid_argument",
            VadError::Config(_) => "invalid_config",
            VadError::NonFinite(_) => "non_finite",
            VadError::Dataset(_) => "dataset_invariant",
            VadError::MissingFile(_) => "missing_file",
            VadError::AlreadyExists(_) => "already_exists",
            VadError::Corrupt { .. } => "corrupt_file",
            VadError::Checkpoint(_) => "checkpoint",
            VadError::Io { .. } => "io",
            VadError::Json(_) => "json",
            VadError::Image(_) => "image",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            VadError::MissingFile(path)
        } else {
            VadError::Io { path, source }
        }
    }
}
