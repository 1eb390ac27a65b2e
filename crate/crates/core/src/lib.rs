//! Blind graphical watermarking for video: patch matching, a position
//! channel for layout recovery, wavelet-domain embedding, attacks and quality
//! metrics.

// Index loops over channels and state read closer to the recurrences.
#![allow(clippy::needless_range_loop)]

pub mod distortion;
pub mod embedder;
pub mod error;
pub mod io;
pub mod matching;
pub mod metrics;
pub mod pipeline;
pub mod poscodec;
pub mod scanning;
pub mod ssm;
pub mod synth;
pub mod tensor;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::{FrameSequence, Plane, Volume, WatermarkImage};
