use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PrnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PrnError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("weight load failed for layer `{layer}`: {reason}")]
    WeightLoad { layer: String, reason: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("anomaly generation failed: {0}")]
    Generation(String),

    #[error("dataset indexing failed: {0}")]
    Index(String),

    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),

    #[error("checkpoint format version {found} cannot be read by this build (expects {expected}); re-export it with a matching version")]
    Version { found: u32, expected: u32 },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("{context}: {source}")]
    Context { context: String, source: Box<PrnError> },

    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("image error on {path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl PrnError {
    pub fn dim(msg: impl Into<String>) -> Self {
        Self::Dimension(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Self::Context { context: context.into(), source: Box::new(self) }
    }
}
