use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("patch index {index} out of range for {num_patches} patches")]
    PatchIndex { index: usize, num_patches: usize },

    #[error("sequence of length {needed} exceeds max_T = {max_t}")]
    Truncation { needed: usize, max_t: usize },

    #[error("answer parse error at clause {clause}: {msg}")]
    AnswerParse { clause: usize, msg: String },

    #[error("stage order violation: {0}")]
    StageOrder(String),

    #[error("supervision variant mismatch: checkpoint was trained with `{checkpoint}`, requested `{requested}`")]
    VariantMismatch { checkpoint: String, requested: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs or configuration, as opposed to
    /// failures inside the library.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Internal(_))
    }
}
