use std::path::PathBuf;

/// Errors produced by mask editing, graph construction, metrics and the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid dimensions {width}x{height}")]
    InvalidDimensions { width: usize, height: usize },

    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("mask is empty")]
    EmptyMask,

    #[error("ground truth has no foreground pixels")]
    EmptyGroundTruth,

    #[error("transform moves the whole foreground out of frame")]
    EmptyResult,

    #[error("transform is not invertible")]
    NonInvertible,

    #[error("no closed contour found in edge map")]
    NoContours,

    #[error("degenerate contour: {0}")]
    DegenerateContour(String),

    #[error("incompatible graphs: {0}")]
    IncompatibleGraphs(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("manifest validation failed: {0}")]
    Manifest(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// Short machine-readable tag, used for JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidDimensions { .. } => "invalid_dimensions",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::EmptyMask => "empty_mask",
            Error::EmptyGroundTruth => "empty_ground_truth",
            Error::EmptyResult => "empty_result",
            Error::NonInvertible => "non_invertible",
            Error::NoContours => "no_contours",
            Error::DegenerateContour(_) => "degenerate_contour",
            Error::IncompatibleGraphs(_) => "incompatible_graphs",
            Error::EmptyBatch => "empty_batch",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json { .. } => "json",
            Error::Manifest(_) => "manifest",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
