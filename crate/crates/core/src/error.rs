use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor axis did not have the expected extent.
    #[error("dimension mismatch on axis `{axis}`: expected {expected}, got {got}")]
    Dim {
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    /// A shape-level problem not tied to a single axis.
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument was outside its documented range.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// A 2x2 linear part could not be inverted.
    #[error("singular affine matrix (|det| = {det:.3e})")]
    Singular { det: f32 },

    /// Batch statistics are undefined for a single element in train mode.
    #[error("degenerate batch statistics: n*h*w = 1 in train mode")]
    DegenerateBatch,

    /// Malformed on-disk data; `offset` is the byte where parsing failed.
    #[error("format error in {path} at byte {offset}: {detail}")]
    Format {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    /// Missing or inconsistent dataset contents.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint or manifest does not match what the caller expects.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Training produced a non-finite loss; `detail` carries mask statistics.
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn format(path: impl Into<PathBuf>, offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
