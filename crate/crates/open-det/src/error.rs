//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("scene {scene_id}: object {object} placement exhausted after {attempts} attempts (overlap cap unsatisfiable)")]
    PlacementExhausted {
        scene_id: u64,
        object: usize,
        attempts: usize,
    },

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("missing image for scene {scene_id}: {path}")]
    MissingImage { scene_id: u64, path: String },

    #[error("NaN loss in term '{term}' at step {step}")]
    NanLoss { term: String, step: u64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
