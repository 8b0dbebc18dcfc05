use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid backbone spec: {0}")]
    InvalidBackbone(String),

    #[error("parameter `{0}` appears in more than one parameter collection")]
    OverlappingPartition(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("length mismatch: {left} predictions vs {right} ground-truth entries")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("not a proper rotation: {0}")]
    NotARotation(String),

    #[error("invalid reference accuracies for task `{task}`: alpha_ft {alpha_ft} must exceed alpha_fe {alpha_fe}")]
    InvalidReference {
        task: String,
        alpha_ft: f64,
        alpha_fe: f64,
    },

    #[error("inconsistent task sets: {0}")]
    InconsistentTasks(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("depth map has no valid pixels")]
    AllHoles,

    #[error("dataset missing: {}", .0.display())]
    DatasetMissing(PathBuf),

    #[error("training diverged: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
