use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {what}: {left:?} vs {right:?}")]
    ShapeMismatch {
        what: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument `{field}`: {reason}")]
    InvalidArgument { field: &'static str, reason: String },

    #[error("degenerate intensity range: q_low = q_high = {0}")]
    DegenerateIntensityRange(f64),

    #[error("crop {crop:?} larger than volume {volume:?}")]
    CropTooLarge { crop: [usize; 3], volume: [usize; 3] },

    #[error("axis {axis} has extent {extent}, not divisible by {factor}")]
    NotDivisible { axis: usize, extent: usize, factor: usize },

    #[error("requested {requested} super-pixels but the volume has only {voxels} voxels")]
    TooManySegments { requested: usize, voxels: usize },

    #[error("synthesis only valid on no-change pairs (subject {0})")]
    NotNoChangePair(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite loss at iteration {iteration}, step {step}: {detail}")]
    NonFiniteLoss {
        iteration: usize,
        step: usize,
        detail: String,
    },

    #[error("lesion could not be placed inside the brain after {0} attempts")]
    LesionPlacement(usize),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
