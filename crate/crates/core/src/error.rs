use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the alignment pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("rotation angle {0} is too close to pi for the logarithm")]
    LogNearPi(f64),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("frame {frame}: {msg}")]
    Frame { frame: u32, msg: String },

    #[error("invalid field query: {0}")]
    Field(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite gradient in parameter block `{0}`")]
    NonFiniteGradient(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("PLY: {0}")]
    Ply(String),

    #[error("PFM: {0}")]
    Pfm(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("png: {0}")]
    Png(String),

    #[error("optimization diverged: {0}")]
    Diverged(String),

    #[error("stage order: {0}")]
    StageOrder(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used for machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonFinite(_) => "non_finite",
            Error::LogNearPi(_) => "log_near_pi",
            Error::Empty(_) => "empty",
            Error::TooFewPoints { .. } => "too_few_points",
            Error::Frame { .. } => "frame",
            Error::Field(_) => "field",
            Error::Shape(_) => "shape",
            Error::NonFiniteGradient(_) => "non_finite_gradient",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Ply(_) => "ply",
            Error::Pfm(_) => "pfm",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Png(_) => "png",
            Error::Diverged(_) => "diverged",
            Error::StageOrder(_) => "stage_order",
        }
    }
}
