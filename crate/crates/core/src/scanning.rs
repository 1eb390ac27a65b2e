//! Scan orders: bijective permutations that flatten a 2D or 3D token grid
//! into the sequence fed to a state-space scan.
//!
//! All flat indices are row-major over `(frame, height, width)` and ignore
//! channels; a token carries all of its channels along with it.

use crate::error::{Error, Result};
use crate::wavelet::Band3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanDirection {
    Forward,
    Reverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ApplyMode {
    /// `out[step] = x[forward[step]]`
    Gather,
    /// Inverse of `Gather`: `out[forward[step]] = x[step]`.
    Scatter,
}

/// Octant visiting order of the 3D local scan, low to high frequency.
pub const OCTANT_ORDER: [Band3; 8] = [
    Band3::LLL,
    Band3::LLH,
    Band3::LHL,
    Band3::HLL,
    Band3::LHH,
    Band3::HLH,
    Band3::HHL,
    Band3::HHH,
];

/// A permutation of `[0, len)` together with its inverse.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanOrder {
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

impl ScanOrder {
    /// Builds an order from a visit sequence, checking it is a permutation.
    pub fn from_forward(forward: Vec<usize>) -> Result<Self> {
        let n = forward.len();
        let mut inverse = vec![usize::MAX; n];
        for (step, &idx) in forward.iter().enumerate() {
            if idx >= n || inverse[idx] != usize::MAX {
                return Err(Error::Invariant(format!(
                    "scan order is not a permutation (index {idx} at step {step})"
                )));
            }
            inverse[idx] = step;
        }
        Ok(ScanOrder { forward, inverse })
    }

    pub fn identity(len: usize) -> Self {
        ScanOrder {
            forward: (0..len).collect(),
            inverse: (0..len).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// Scan step → flat index.
    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    /// Flat index → scan step.
    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    /// Reorders `x`, where each of the `len` tokens spans `row` contiguous values.
    pub fn apply_rows<T: Copy>(&self, x: &[T], row: usize, mode: ApplyMode) -> Result<Vec<T>> {
        if x.len() != self.len() * row {
            return Err(Error::dims(format!(
                "sequence of {} values does not match order of {} tokens x {row}",
                x.len(),
                self.len()
            )));
        }
        let table = match mode {
            ApplyMode::Gather => &self.forward,
            ApplyMode::Scatter => &self.inverse,
        };
        let mut out = Vec::with_capacity(x.len());
        for &src in table {
            out.extend_from_slice(&x[src * row..(src + 1) * row]);
        }
        Ok(out)
    }
}

/// Reorders a flat sequence whose length equals `order.len()`.
pub fn apply_order<T: Copy>(seq: &[T], order: &ScanOrder, mode: ApplyMode) -> Result<Vec<T>> {
    order.apply_rows(seq, 1, mode)
}

fn require_even(dims: &[(char, usize)]) -> Result<()> {
    for &(name, n) in dims {
        if n == 0 || n % 2 != 0 {
            return Err(Error::dims(format!(
                "scan: {name}={n} must be even and positive"
            )));
        }
    }
    Ok(())
}

/// Frequency scan over a 2D mosaic: quadrants LL, LH, HL, HH, each in raster
/// order.
pub fn scan_2d_freq(height: usize, width: usize) -> Result<ScanOrder> {
    require_even(&[('H', height), ('W', width)])?;
    let (h2, w2) = (height / 2, width / 2);
    let mut forward = Vec::with_capacity(height * width);
    for (qy, qx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        for y in 0..h2 {
            for x in 0..w2 {
                forward.push((qy * h2 + y) * width + qx * w2 + x);
            }
        }
    }
    ScanOrder::from_forward(forward)
}

/// Spatiotemporal local scan over a 3D mosaic. Octants are visited in
/// [`OCTANT_ORDER`] (reversed for [`ScanDirection::Reverse`]); inside an
/// octant every frame is rastered completely before moving to the next frame.
pub fn scan_3d_local(
    frames: usize,
    height: usize,
    width: usize,
    direction: ScanDirection,
) -> Result<ScanOrder> {
    require_even(&[('F', frames), ('H', height), ('W', width)])?;
    let (f2, h2, w2) = (frames / 2, height / 2, width / 2);
    let mut octants = OCTANT_ORDER;
    if direction == ScanDirection::Reverse {
        octants.reverse();
    }
    let mut forward = Vec::with_capacity(frames * height * width);
    for band in octants {
        let t0 = if band.frame_high() { f2 } else { 0 };
        let y0 = if band.height_high() { h2 } else { 0 };
        let x0 = if band.width_high() { w2 } else { 0 };
        for t in t0..t0 + f2 {
            for y in y0..y0 + h2 {
                for x in x0..x0 + w2 {
                    forward.push((t * height + y) * width + x);
                }
            }
        }
    }
    ScanOrder::from_forward(forward)
}

/// Plain row-major order over `(frame, height, width)`.
pub fn scan_3d_vanilla(frames: usize, height: usize, width: usize) -> ScanOrder {
    ScanOrder::identity(frames * height * width)
}
