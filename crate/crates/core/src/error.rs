use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConvError {
    #[error("invalid convolution geometry: {0}")]
    InvalidGeometry(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("failed to allocate {bytes} bytes of workspace")]
    AllocationFailure { bytes: u128 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: unknown layer kind `{kind}`")]
    UnknownLayerKind { line: usize, kind: String },

    #[error("result check failed at layer {layer}: max relative error {error:e}")]
    CheckFailed { layer: usize, error: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, ConvError>;
