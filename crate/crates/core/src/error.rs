use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the segmentation workflow.
#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range for {axis} view with extent {extent}")]
    Bounds {
        axis: &'static str,
        index: usize,
        extent: usize,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("spec error: {0}")]
    Spec(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("reconstruction error: {0}")]
    Reconstruction(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
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

    /// True when the error stems from malformed input rather than computation.
    pub fn is_input_error(&self) -> bool {
        matches!(self, Error::Format(_) | Error::Config(_) | Error::Spec(_) | Error::Json(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
