use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AfmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AfmError {
    #[error("dimension mismatch at layer {layer}: {detail}")]
    Dimension { layer: usize, detail: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("length error in {path}: {detail}")]
    Length { path: PathBuf, detail: String },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("checkpoint corrupted: {0}")]
    Corruption(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("checkpoint tensor `{tensor}`: {detail}")]
    Tensor { tensor: String, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl AfmError {
    pub(crate) fn dim(layer: usize, detail: impl Into<String>) -> Self {
        AfmError::Dimension {
            layer,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AfmError::Io {
            path: path.into(),
            source,
        }
    }
}
