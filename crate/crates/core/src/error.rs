use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
///
/// Each variant belongs to one [`ErrorKind`] so front ends can map failures
/// onto a stable exit-code taxonomy.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invariant violated: {what}")]
    Invariant { what: String },

    #[error("pixel value {value} at index {index} is outside [0, 1]")]
    PixelOutOfRange { index: usize, value: f64 },

    #[error("non-finite pixel value at index {index}")]
    NonFinite { index: usize },

    #[error("invalid bounding box ({x1}, {y1}, {x2}, {y2})")]
    DegenerateBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("data error in {path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("detector `{id}` failed: {message}")]
    Detector { id: String, message: String },

    #[error("detector `{id}` weights changed during patch optimization")]
    WeightDrift { id: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("toy detector reached clean AP {ap:.4}, below the required {required:.2}; train for more epochs or on more images")]
    DetectorUnderfit { ap: f64, required: f64 },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Invocation,
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config { .. } => ErrorKind::Config,
            Error::Numeric(_) | Error::WeightDrift { .. } | Error::DetectorUnderfit { .. } => {
                ErrorKind::Numeric
            }
            Error::InvalidArgument(_) => ErrorKind::Invocation,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
