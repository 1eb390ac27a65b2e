//! Position channel: a patch index rendered as a replicated binary plane,
//! soft decoding with a confidence score, and confidence-guided greedy
//! recovery of the patch layout.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matching::reassemble;
use crate::tensor::Plane;

/// `K = max(1, ⌈log2 P⌉)`.
pub fn bits_for(positions: usize) -> usize {
    let mut k = 0;
    while (1usize << k) < positions {
        k += 1;
    }
    k.max(1)
}

/// Fixed `(P, P_s, K)` layout of the position plane. Bit `j` (MSB first)
/// fills raster cells `[j·b, (j+1)·b)` with `b = ⌊P_s²/K⌋`; cells past
/// `K·b` repeat the last bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PositionCodec {
    pub positions: usize,
    pub patch_size: usize,
    pub bits: usize,
}

/// Soft decode of one plane.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionDecode {
    /// per-bit mean in `[0, 1]`, MSB first
    pub prob: Vec<f64>,
    /// `(1/K) Σ |p_j − 0.5|`
    pub confidence: f64,
    /// binary value of `p ≥ 0.5`; may exceed `P − 1` when `P < 2^K`
    pub index: usize,
}

pub fn confidence(prob: &[f64]) -> f64 {
    if prob.is_empty() {
        return 0.0;
    }
    prob.iter().map(|p| (p - 0.5).abs()).sum::<f64>() / prob.len() as f64
}

impl PositionCodec {
    pub fn new(positions: usize, patch_size: usize) -> Result<Self> {
        Self::with_bits(positions, patch_size, bits_for(positions))
    }

    pub fn with_bits(positions: usize, patch_size: usize, bits: usize) -> Result<Self> {
        if positions == 0 {
            return Err(Error::param("position codec needs at least one position"));
        }
        if bits == 0 || bits >= usize::BITS as usize || positions > 1usize << bits {
            return Err(Error::param(format!(
                "{bits} bits cannot address {positions} positions"
            )));
        }
        if patch_size * patch_size < bits {
            return Err(Error::param(format!(
                "a {patch_size}x{patch_size} plane cannot hold {bits} bits"
            )));
        }
        Ok(PositionCodec {
            positions,
            patch_size,
            bits,
        })
    }

    pub fn cells(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn block_len(&self) -> usize {
        self.cells() / self.bits
    }

    /// Bit index carried by raster cell `m`.
    pub fn bit_of_cell(&self, m: usize) -> usize {
        (m / self.block_len()).min(self.bits - 1)
    }

    /// MSB-first code of `index`.
    pub fn index_bits(&self, index: usize) -> Vec<u8> {
        (0..self.bits)
            .map(|j| ((index >> (self.bits - 1 - j)) & 1) as u8)
            .collect()
    }

    pub fn bits_index(&self, bits: &[u8]) -> usize {
        bits.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize)
    }

    pub fn encode(&self, index: usize) -> Result<Plane> {
        if index >= self.positions {
            return Err(Error::param(format!(
                "position {index} out of range for {} positions",
                self.positions
            )));
        }
        let bits = self.index_bits(index);
        let data = (0..self.cells())
            .map(|m| bits[self.bit_of_cell(m)] as f32)
            .collect();
        Plane::from_vec(self.patch_size, self.patch_size, 1, data)
    }

    /// Samples are clipped to `[0, 1]` before averaging.
    pub fn decode(&self, plane: &Plane) -> Result<PositionDecode> {
        if plane.height != self.patch_size || plane.width != self.patch_size || plane.channels != 1
        {
            return Err(Error::dims(format!(
                "position plane {}x{}x{} does not match {}x{}x1",
                plane.height, plane.width, plane.channels, self.patch_size, self.patch_size
            )));
        }
        let mut sum = vec![0f64; self.bits];
        let mut count = vec![0usize; self.bits];
        for (m, &v) in plane.data.iter().enumerate() {
            let j = self.bit_of_cell(m);
            let v = if v.is_nan() { 0.5 } else { v.clamp(0.0, 1.0) };
            sum[j] += v as f64;
            count[j] += 1;
        }
        let prob: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
        let bits: Vec<u8> = prob.iter().map(|&p| u8::from(p >= 0.5)).collect();
        Ok(PositionDecode {
            confidence: confidence(&prob),
            index: self.bits_index(&bits),
            prob,
        })
    }
}

/// One extracted patch with its decoded position.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedPatch {
    pub content: Plane,
    pub prob: Vec<f64>,
    pub confidence: f64,
    pub index: usize,
    pub frame: usize,
    pub region: usize,
}

/// Decodes many planes in parallel.
pub fn decode_all(codec: &PositionCodec, planes: &[Plane]) -> Result<Vec<PositionDecode>> {
    planes.par_iter().map(|p| codec.decode(p)).collect()
}

/// Confidence-guided greedy assignment. Input is `(decoded index,
/// confidence)` per patch in slot order; output is the position given to
/// each patch, a permutation of `0..P`.
///
/// Each patch first claims its decoded index (clamped to `P − 1`); a later
/// claimant displaces the holder only with strictly higher confidence. Losers
/// are then placed by descending confidence at the nearest vacant position,
/// preferring the lower one on equal distance.
pub fn assign_positions(claims: &[(usize, f64)], positions: usize) -> Result<Vec<usize>> {
    if claims.len() != positions {
        return Err(Error::dims(format!(
            "{} decoded patches for {positions} positions",
            claims.len()
        )));
    }
    let mut holder: Vec<Option<usize>> = vec![None; positions];
    let mut pool = Vec::new();
    for (i, &(index, conf)) in claims.iter().enumerate() {
        let pos = index.min(positions - 1);
        match holder[pos] {
            None => holder[pos] = Some(i),
            Some(h) if conf > claims[h].1 => {
                pool.push(h);
                holder[pos] = Some(i);
            }
            Some(_) => pool.push(i),
        }
    }

    pool.sort_by(|&a, &b| claims[b].1.total_cmp(&claims[a].1));
    let mut vacant: BTreeSet<usize> = (0..positions).filter(|&p| holder[p].is_none()).collect();
    for i in pool {
        let target = claims[i].0.min(positions - 1);
        let below = vacant.range(..=target).next_back().copied();
        let above = vacant.range(target..).next().copied();
        let pos = match (below, above) {
            (Some(b), Some(a)) => {
                if a - target < target - b {
                    a
                } else {
                    b
                }
            }
            (Some(b), None) => b,
            (None, Some(a)) => a,
            (None, None) => {
                return Err(Error::Invariant("no vacant position left".into()));
            }
        };
        vacant.remove(&pos);
        holder[pos] = Some(i);
    }

    let mut out = vec![usize::MAX; positions];
    for (pos, h) in holder.into_iter().enumerate() {
        let i = h.ok_or_else(|| Error::Invariant(format!("position {pos} left empty")))?;
        out[i] = pos;
    }
    Ok(out)
}

/// Places every decoded patch and tiles the result into a `rows × cols`
/// watermark.
pub fn recover_layout(decoded: &[DecodedPatch], rows: usize, cols: usize) -> Result<Plane> {
    let p = rows * cols;
    let claims: Vec<(usize, f64)> = decoded.iter().map(|d| (d.index, d.confidence)).collect();
    let pos = assign_positions(&claims, p)?;
    let Some(first) = decoded.first() else {
        return Ok(Plane::zeros(0, 0, 1));
    };
    let (ps, ch) = (first.content.height, first.content.channels);
    let mut ordered = vec![Plane::zeros(ps, ps, ch); p];
    for (d, &at) in decoded.iter().zip(&pos) {
        ordered[at] = d.content.clone();
    }
    reassemble(&ordered, rows, cols, ps, ch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_counts() {
        assert_eq!(bits_for(256), 8);
        assert_eq!(bits_for(1), 1);
        assert_eq!(bits_for(2), 1);
        assert_eq!(bits_for(3), 2);
        assert_eq!(bits_for(257), 9);
    }

    #[test]
    fn extreme_indices() {
        let c = PositionCodec::new(256, 16).unwrap();
        assert!(c.encode(0).unwrap().data.iter().all(|&v| v == 0.0));
        assert!(c.encode(255).unwrap().data.iter().all(|&v| v == 1.0));
        assert!(c.encode(256).is_err());
    }

    #[test]
    fn index_one_layout() {
        let c = PositionCodec::new(256, 16).unwrap();
        let p = c.encode(1).unwrap();
        assert!(p.data[..7 * 32].iter().all(|&v| v == 0.0));
        assert!(p.data[7 * 32..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn trailing_cells_repeat_last_bit() {
        // 16 cells, 3 bits: blocks of 5, cell 15 belongs to bit 2
        let c = PositionCodec::with_bits(8, 4, 3).unwrap();
        let p = c.encode(0b101).unwrap();
        assert_eq!(p.data[10..].to_vec(), vec![1.0; 6]);
        assert_eq!(p.data[5..10].to_vec(), vec![0.0; 5]);
        assert_eq!(c.decode(&p).unwrap().index, 5);
    }

    #[test]
    fn clean_roundtrip_confidence() {
        let c = PositionCodec::new(256, 16).unwrap();
        let d = c.decode(&c.encode(37).unwrap()).unwrap();
        assert_eq!(d.index, 37);
        assert_eq!(d.confidence, 0.5);
    }

    #[test]
    fn half_plane_threshold() {
        let c = PositionCodec::new(256, 16).unwrap();
        let d = c.decode(&Plane::filled(16, 16, 1, 0.5)).unwrap();
        assert_eq!(d.confidence, 0.0);
        assert_eq!(d.index, 255);
    }

    #[test]
    fn decode_clips() {
        let c = PositionCodec::new(4, 2).unwrap();
        let p = Plane::from_vec(2, 2, 1, vec![-3.0, -1.0, 4.0, 2.0]).unwrap();
        let d = c.decode(&p).unwrap();
        assert_eq!(d.prob, vec![0.0, 1.0]);
        assert_eq!(d.index, 1);
    }

    #[test]
    fn hand_traced_conflict() {
        let mut claims: Vec<(usize, f64)> = (0..8).map(|i| (i, 0.5)).collect();
        // patches 5 and 6 both claim 5; position 6 becomes vacant
        claims[5] = (5, 0.2);
        claims[6] = (5, 0.4);
        let pos = assign_positions(&claims, 8).unwrap();
        assert_eq!(pos[6], 5);
        assert_eq!(pos[5], 6);
    }

    #[test]
    fn equal_confidence_first_wins_and_nearest_lower() {
        let claims = vec![(1, 0.3), (1, 0.3), (3, 0.5), (3, 0.1)];
        // stage 2: 0→1, 2→3; pool [1, 3]; vacant {0, 2}
        // patch 1 (0.3) targets 1: 0 and 2 tie → 0; patch 3 targets 3 → 2
        assert_eq!(assign_positions(&claims, 4).unwrap(), vec![1, 0, 3, 2]);
    }

    #[test]
    fn all_claim_zero() {
        let claims = vec![(0, 0.25); 16];
        let pos = assign_positions(&claims, 16).unwrap();
        assert_eq!(pos, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn out_of_range_claim_clamps() {
        let pos = assign_positions(&[(7, 0.5), (0, 0.5), (1, 0.5)], 3).unwrap();
        assert_eq!(pos, vec![2, 0, 1]);
        assert!(assign_positions(&[(0, 0.5)], 2).is_err());
    }

    #[test]
    fn identity_reassembly() {
        let c = PositionCodec::new(4, 2).unwrap();
        let decoded: Vec<DecodedPatch> = (0..4)
            .rev()
            .map(|i| DecodedPatch {
                content: Plane::filled(2, 2, 1, i as f32 / 4.0),
                prob: vec![],
                confidence: 0.5,
                index: c.decode(&c.encode(i).unwrap()).unwrap().index,
                frame: 0,
                region: 3 - i,
            })
            .collect();
        let w = recover_layout(&decoded, 2, 2).unwrap();
        assert_eq!(w.get(0, 0, 0), 0.0);
        assert_eq!(w.get(0, 2, 0), 0.25);
        assert_eq!(w.get(2, 0, 0), 0.5);
        assert_eq!(w.get(3, 3, 0), 0.75);
    }
}
