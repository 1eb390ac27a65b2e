use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    Dimensions(String),

    #[error("inconsistent frame dimensions: {0}")]
    InconsistentFrames(String),

    #[error(
        "dimensions not divisible by patch size: {height}x{width} with patch size {patch_size}"
    )]
    NotDivisible {
        height: usize,
        width: usize,
        patch_size: usize,
    },

    #[error("sample out of range [0,1] at flat index {index}: {value}")]
    SampleRange { index: usize, value: f32 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("infeasible capacity: {0}")]
    Capacity(String),

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("unsupported pixel format: {0}")]
    PixelFormat(String),

    #[error("malformed {what}: {detail}")]
    Parse { what: &'static str, detail: String },

    #[error("path not found: {}", .0.display())]
    MissingPath(PathBuf),

    #[error("codec unavailable: {0}")]
    CodecUnavailable(String),

    #[error("codec failed: {0}")]
    Codec(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::Dimensions(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn parse(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Parse {
            what,
            detail: detail.into(),
        }
    }
}
