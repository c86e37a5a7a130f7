use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("config line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("token width mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("degenerate box {width:.2}x{height:.2} px (minimum side is 2 px)")]
    DegenerateBox { width: f64, height: f64 },

    #[error("point ({x:.2}, {y:.2}) outside a {size}x{size} image")]
    OutOfBounds { x: f64, y: f64, size: usize },

    #[error("invalid weak label: {0}")]
    InvalidLabel(String),

    #[error("{count} parts exceed the query capacity of {capacity}")]
    TooManyParts { count: usize, capacity: usize },

    #[error("cost matrix contains a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),

    #[error("missing image {}", .0.display())]
    MissingImage(PathBuf),

    #[error("malformed annotation {id}: {reason}")]
    MalformedAnnotation { id: u64, reason: String },

    #[error("invalid split fractions: {0}")]
    InvalidFraction(String),

    #[error("no category qualifies for the metric")]
    EmptyEvaluation,

    #[error("ground-truth mask read inside a training scope")]
    TaintedAccess,

    #[error("backend adapter: {0}")]
    Adapter(String),

    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("png encoding: {0}")]
    Png(#[from] png::EncodingError),
}

impl Error {
    /// Process exit code used by the command-line driver. Usage errors use 2
    /// (clap's convention), so module errors start at 3.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::ConfigParse { .. } => 3,
            Error::ShapeMismatch(_) | Error::DimMismatch { .. } => 4,
            Error::DegenerateBox { .. } | Error::OutOfBounds { .. } | Error::InvalidLabel(_) => 5,
            Error::TooManyParts { .. } => 6,
            Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => 7,
            Error::VersionMismatch(_) | Error::CorruptFile(_) => 8,
            Error::MissingImage(_) | Error::MalformedAnnotation { .. } => 9,
            Error::InvalidFraction(_) => 10,
            Error::EmptyEvaluation => 11,
            Error::TaintedAccess => 12,
            Error::Adapter(_) => 13,
            Error::Tensor(_) => 14,
            Error::Io(_) => 15,
            Error::Json(_) => 16,
            Error::Image(_) | Error::Png(_) => 17,
        }
    }
}
