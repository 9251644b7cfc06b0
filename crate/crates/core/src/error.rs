use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("invalid camera pose: {0}")]
    InvalidPose(String),

    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("missing key `{key}` in {path}")]
    MissingKey { path: PathBuf, key: String },

    #[error("unknown scene spec `{0}` (known: translating-sphere, bouncing-ball, occluder, static)")]
    UnknownScene(String),

    #[error("scene appears empty: no grid vertex exceeds alpha threshold {threshold:e}; try lowering it")]
    EmptyScene { threshold: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used by the command-line front end.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidBox(_) | Error::InvalidGrid(_) | Error::Dimension { .. } => "invalid",
            Error::InvalidArgument(_) => "argument",
            Error::OutOfRange(_) => "range",
            Error::InvalidPose(_) => "pose",
            Error::Manifest { .. } | Error::MissingKey { .. } => "manifest",
            Error::UnknownScene(_) => "unknown-scene",
            Error::EmptyScene { .. } => "empty-scene",
            Error::NonFinite(_) => "non-finite",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::Image { .. } => "image",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
