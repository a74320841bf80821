use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header {path}: {source}")]
    Header {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("unsupported dtype {0:?}, expected \"f32le\"")]
    UnsupportedDtype(String),

    #[error("data length mismatch: header describes {expected} values, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("invalid volume metadata: {0}")]
    InvalidMetadata(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("degenerate intensity range (min == max == {0})")]
    DegenerateRange(f64),

    #[error("degenerate histogram: only one intensity bin occupied")]
    DegenerateHistogram,

    #[error("zero variance in correlation input")]
    ZeroVariance,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown category {value:?} for field {field}")]
    UnknownCategory { field: &'static str, value: String },

    #[error("labels contain a single class")]
    SingleClass,

    #[error("cannot stratify: class {class} has {count} members for {folds} folds")]
    StratifyTooSmall { class: u8, count: usize, folds: usize },

    #[error("optimization diverged after {iterations} iterations")]
    Diverged { iterations: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("stage mismatch: expected {expected}, got {found}")]
    StageMismatch { expected: String, found: String },

    #[error("point outside grid: {0:?}")]
    OutsideGrid([f64; 3]),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("csv error: {0}")]
    Csv(String),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Header { .. } => "header",
            Error::UnsupportedDtype(_) => "unsupported_dtype",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::InvalidMetadata(_) => "invalid_metadata",
            Error::GridMismatch(_) => "grid_mismatch",
            Error::DegenerateRange(_) => "degenerate_range",
            Error::DegenerateHistogram => "degenerate_histogram",
            Error::ZeroVariance => "zero_variance",
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::UnknownCategory { .. } => "unknown_category",
            Error::SingleClass => "single_class",
            Error::StratifyTooSmall { .. } => "stratify_too_small",
            Error::Diverged { .. } => "diverged",
            Error::NonFinite(_) => "non_finite",
            Error::StageMismatch { .. } => "stage_mismatch",
            Error::OutsideGrid(_) => "outside_grid",
            Error::Checkpoint(_) => "checkpoint",
            Error::Csv(_) => "csv",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
