use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("age {0} is outside the supported range 14..=62")]
    AgeOutOfRange(i64),

    #[error("alignment failed: {0}")]
    Alignment(String),

    #[error("patch {name} at ({row}, {col}) size {height}x{width} does not fit a {canvas}x{canvas} canvas")]
    PatchBounds {
        name: String,
        row: usize,
        col: usize,
        height: usize,
        width: usize,
        canvas: usize,
    },

    #[error("cannot split {identities} identities into {folds} folds")]
    TooFewIdentities { identities: usize, folds: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("perceptor backend: {0}")]
    Backend(String),

    #[error("training failure: {0}")]
    TrainingFailure(String),

    #[error("non-finite loss at iteration {iteration}: {components}")]
    NonFinite { iteration: u64, components: String },

    #[error("checkpoint format version {found} is not supported (expected {expected}); re-export the checkpoint with a matching release")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
