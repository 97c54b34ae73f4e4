use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("image file for id `{id}` not found at {path}")]
    MissingImage { id: String, path: PathBuf },

    #[error("annotation {annotation_id} references unknown image id {image_id}")]
    UnknownImageId { annotation_id: u64, image_id: u64 },

    #[error("duplicate image id `{0}`")]
    DuplicateImageId(String),

    #[error("shape mismatch in `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite values in `{0}`")]
    NonFinite(String),

    #[error("non-finite total loss at iteration {iteration}: {terms}")]
    NonFiniteLoss { iteration: usize, terms: String },

    #[error("rank deficient input: {0}")]
    RankDeficient(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
