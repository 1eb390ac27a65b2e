//! Blind embedding by quantization index modulation on the LL band of each
//! assigned region.
//!
//! Every region carries, per channel, a key-seeded permutation of its LL
//! coefficients and a key-seeded dither. Content bits (B-bit samples of one
//! watermark channel) come first, followed by `R_c` interleaved replicas of
//! the `K` position bits. Channels without content carry replicas only.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matching::{frame_capacity, partition, region_bounds, region_grid, AssignmentPlan};
use crate::poscodec::{bits_for, DecodedPatch, PositionCodec};
use crate::tensor::{FrameSequence, Plane, Volume, WatermarkImage};
use crate::wavelet::{dwt2, idwt2};

pub const DEFAULT_DELTA: f64 = 0.03;
pub const DEFAULT_BIT_DEPTH: usize = 4;
pub const MIN_REPLICAS: usize = 4;
pub const CLIP_RETRIES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QimConfig {
    pub delta: f64,
    pub bit_depth: usize,
    pub patch_size: usize,
    pub seed: u64,
}

impl Default for QimConfig {
    fn default() -> Self {
        QimConfig {
            delta: DEFAULT_DELTA,
            bit_depth: DEFAULT_BIT_DEPTH,
            patch_size: crate::matching::DEFAULT_PATCH_SIZE,
            seed: 0,
        }
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta.is_finite() && delta > 0.0 {
        Ok(())
    } else {
        Err(Error::param(format!("delta must be positive, got {delta}")))
    }
}

/// Nearest point of `{2kΔ}` (bit 0) or `{(2k+1)Δ}` (bit 1).
pub fn qim_point(c: f64, bit: u8, delta: f64) -> f64 {
    let step = 2.0 * delta;
    if bit == 0 {
        step * (c / step).round()
    } else {
        step * ((c - delta) / step).round() + delta
    }
}

pub fn qim_bit(c: f64, delta: f64) -> u8 {
    ((c / delta).round() as i64).rem_euclid(2) as u8
}

/// Quantizes the first `bits.len()` coefficients; the rest pass through.
pub fn qim_embed_bits(coeffs: &[f64], bits: &[u8], delta: f64) -> Result<Vec<f64>> {
    check_delta(delta)?;
    if bits.len() > coeffs.len() {
        return Err(Error::Capacity(format!(
            "{} bits for {} coefficients",
            bits.len(),
            coeffs.len()
        )));
    }
    let mut out = coeffs.to_vec();
    for (c, &b) in out.iter_mut().zip(bits) {
        *c = qim_point(*c, b, delta);
    }
    Ok(out)
}

pub fn qim_decode_bits(coeffs: &[f64], count: usize, delta: f64) -> Result<Vec<u8>> {
    check_delta(delta)?;
    if count > coeffs.len() {
        return Err(Error::Capacity(format!(
            "{count} bits requested from {} coefficients",
            coeffs.len()
        )));
    }
    Ok(coeffs[..count].iter().map(|&c| qim_bit(c, delta)).collect())
}

/// Uniform B-bit quantization of samples in `[0, 1]`.
pub fn quantize_sample(v: f32, bit_depth: usize) -> u32 {
    let levels = ((1u32 << bit_depth) - 1) as f32;
    (v.clamp(0.0, 1.0) * levels).round() as u32
}

pub fn dequantize_sample(q: u32, bit_depth: usize) -> f32 {
    q as f32 / ((1u32 << bit_depth) - 1) as f32
}

/// The watermark as the extractor can at best return it.
pub fn quantize_plane(w: &Plane, bit_depth: usize) -> Plane {
    let data = w
        .data
        .iter()
        .map(|&v| dequantize_sample(quantize_sample(v, bit_depth), bit_depth))
        .collect();
    Plane { data, ..w.clone() }
}

/// Content bits of channel `c` of a patch: raster samples, MSB first.
pub fn content_bits(patch: &Plane, c: usize, bit_depth: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(patch.pixels() * bit_depth);
    for s in 0..patch.pixels() {
        let q = quantize_sample(patch.data[s * patch.channels + c], bit_depth);
        for b in (0..bit_depth).rev() {
            out.push(((q >> b) & 1) as u8);
        }
    }
    out
}

/// Everything the blind extractor needs besides the video.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyFile {
    pub delta: f64,
    pub bit_depth: usize,
    pub patch_size: usize,
    pub grid: (usize, usize),
    pub seed: u64,
    /// position bits
    pub bits: usize,
    /// position replicas in a content-carrying channel
    pub replicas: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub wm_height: usize,
    pub wm_width: usize,
    pub wm_channels: usize,
}

/// Per-channel bit budget of one region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelLayout {
    pub content_bits: usize,
    pub replicas: usize,
}

impl ChannelLayout {
    pub fn total(&self, k: usize) -> usize {
        self.content_bits + self.replicas * k
    }
}

impl KeyFile {
    /// Derives and validates the key for embedding a `wm_*` watermark into a
    /// `frames × height × width × channels` video.
    #[allow(clippy::too_many_arguments)]
    pub fn derive(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        wm_height: usize,
        wm_width: usize,
        wm_channels: usize,
        cfg: &QimConfig,
    ) -> Result<Self> {
        check_delta(cfg.delta)?;
        if cfg.bit_depth == 0 || cfg.bit_depth > 16 {
            return Err(Error::param(format!(
                "bit depth {} not in 1..=16",
                cfg.bit_depth
            )));
        }
        if cfg.patch_size == 0
            || !wm_height.is_multiple_of(cfg.patch_size)
            || !wm_width.is_multiple_of(cfg.patch_size)
        {
            return Err(Error::NotDivisible {
                height: wm_height,
                width: wm_width,
                patch_size: cfg.patch_size,
            });
        }
        let p = (wm_height / cfg.patch_size) * (wm_width / cfg.patch_size);
        let cap = frame_capacity(p, frames);
        let key = KeyFile {
            delta: cfg.delta,
            bit_depth: cfg.bit_depth,
            patch_size: cfg.patch_size,
            grid: region_grid(cap),
            seed: cfg.seed,
            bits: bits_for(p),
            replicas: 0,
            frames,
            height,
            width,
            channels,
            wm_height,
            wm_width,
            wm_channels,
        };
        let replicas = key.compute_layout()?.first().map_or(0, |l| l.replicas);
        let key = KeyFile { replicas, ..key };
        key.validate()?;
        Ok(key)
    }

    pub fn config(&self) -> QimConfig {
        QimConfig {
            delta: self.delta,
            bit_depth: self.bit_depth,
            patch_size: self.patch_size,
            seed: self.seed,
        }
    }

    pub fn rows(&self) -> usize {
        self.wm_height / self.patch_size
    }

    pub fn cols(&self) -> usize {
        self.wm_width / self.patch_size
    }

    pub fn positions(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn cap(&self) -> usize {
        frame_capacity(self.positions(), self.frames)
    }

    /// Number of (frame, region) slots the extractor reads.
    pub fn slots(&self) -> usize {
        self.frames * self.cap()
    }

    /// Pixel bounds `(y0, x0, h, w)` of region `k`, aligned to 2×2 blocks.
    pub fn region(&self, k: usize) -> (usize, usize, usize, usize) {
        let (y0, x0, h, w) = region_bounds(self.height / 2, self.width / 2, self.grid, k);
        (2 * y0, 2 * x0, 2 * h, 2 * w)
    }

    /// LL coefficients per channel in the smallest region.
    pub fn min_ll(&self) -> usize {
        let (gh, gw) = self.grid;
        (self.height / 2 / gh) * (self.width / 2 / gw)
    }

    fn compute_layout(&self) -> Result<Vec<ChannelLayout>> {
        if self.positions() == 0 {
            return Ok(Vec::new());
        }
        if self.wm_channels > self.channels {
            return Err(Error::Capacity(format!(
                "a {}-channel watermark needs at least {} video channels, got {}",
                self.wm_channels, self.wm_channels, self.channels
            )));
        }
        if !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) || self.frames == 0 {
            return Err(Error::Geometry(format!(
                "video {}x{}x{} cannot be tiled into 2x2 blocks",
                self.frames, self.height, self.width
            )));
        }
        let (gh, gw) = self.grid;
        if self.height / 2 < gh || self.width / 2 < gw {
            return Err(Error::Geometry(format!(
                "{}x{} frames cannot hold a {gh}x{gw} region grid",
                self.height, self.width
            )));
        }
        let ll = self.min_ll();
        let content = self.patch_size * self.patch_size * self.bit_depth;
        (0..self.channels)
            .map(|c| {
                let content_bits = if c < self.wm_channels { content } else { 0 };
                let replicas = ll.saturating_sub(content_bits) / self.bits;
                if c < self.wm_channels && (ll < content_bits || replicas < MIN_REPLICAS) {
                    return Err(Error::Capacity(format!(
                        "region LL holds {ll} coefficients per channel; {content_bits} content bits \
                         plus {MIN_REPLICAS}x{} position bits do not fit",
                        self.bits
                    )));
                }
                Ok(ChannelLayout {
                    content_bits,
                    replicas,
                })
            })
            .collect()
    }

    pub fn layout(&self) -> Result<Vec<ChannelLayout>> {
        self.compute_layout()
    }

    /// Position replicas summed over channels.
    pub fn total_replicas(&self) -> Result<usize> {
        Ok(self.layout()?.iter().map(|l| l.replicas).sum())
    }

    pub fn validate(&self) -> Result<()> {
        check_delta(self.delta)?;
        if self.patch_size == 0 || self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(Error::param("key has zero patch size or grid"));
        }
        let p = self.positions();
        if p > 0 {
            if self.grid.0 * self.grid.1 != self.cap() {
                return Err(Error::param(format!(
                    "grid {}x{} does not hold capacity {}",
                    self.grid.0,
                    self.grid.1,
                    self.cap()
                )));
            }
            PositionCodec::with_bits(p, self.patch_size, self.bits)?;
            let layout = self.compute_layout()?;
            if layout.first().map(|l| l.replicas) != Some(self.replicas) {
                return Err(Error::param(format!(
                    "key replica count {} disagrees with geometry",
                    self.replicas
                )));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "delta={}", self.delta);
        let _ = writeln!(s, "bit_depth={}", self.bit_depth);
        let _ = writeln!(s, "patch_size={}", self.patch_size);
        let _ = writeln!(s, "grid={}x{}", self.grid.0, self.grid.1);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "K={}", self.bits);
        let _ = writeln!(s, "R={}", self.replicas);
        let _ = writeln!(s, "frames={}", self.frames);
        let _ = writeln!(s, "height={}", self.height);
        let _ = writeln!(s, "width={}", self.width);
        let _ = writeln!(s, "channels={}", self.channels);
        let _ = writeln!(s, "wm_height={}", self.wm_height);
        let _ = writeln!(s, "wm_width={}", self.wm_width);
        let _ = writeln!(s, "wm_channels={}", self.wm_channels);
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse("key file", format!("expected key=value: {line:?}")))?;
            if kv
                .insert(k.trim().to_string(), v.trim().to_string())
                .is_some()
            {
                return Err(Error::parse("key file", format!("duplicate key {k:?}")));
            }
        }
        fn take<T: std::str::FromStr>(kv: &mut BTreeMap<String, String>, k: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            let v = kv
                .remove(k)
                .ok_or_else(|| Error::parse("key file", format!("missing {k}")))?;
            v.parse()
                .map_err(|e| Error::parse("key file", format!("{k}={v}: {e}")))
        }
        let grid: String = take(&mut kv, "grid")?;
        let grid = grid
            .split_once('x')
            .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
            .ok_or_else(|| Error::parse("key file", format!("grid={grid}")))?;
        let key = KeyFile {
            delta: take(&mut kv, "delta")?,
            bit_depth: take(&mut kv, "bit_depth")?,
            patch_size: take(&mut kv, "patch_size")?,
            grid,
            seed: take(&mut kv, "seed")?,
            bits: take(&mut kv, "K")?,
            replicas: take(&mut kv, "R")?,
            frames: take(&mut kv, "frames")?,
            height: take(&mut kv, "height")?,
            width: take(&mut kv, "width")?,
            channels: take(&mut kv, "channels")?,
            wm_height: take(&mut kv, "wm_height")?,
            wm_width: take(&mut kv, "wm_width")?,
            wm_channels: take(&mut kv, "wm_channels")?,
        };
        if let Some(k) = kv.keys().next() {
            return Err(Error::parse("key file", format!("unknown key {k:?}")));
        }
        key.validate()?;
        Ok(key)
    }

    fn check_video(&self, v: &FrameSequence) -> Result<()> {
        let got = v.shape();
        let want = [self.frames, self.height, self.width, self.channels];
        if got != want {
            return Err(Error::Geometry(format!(
                "video is {got:?} (F,H,W,C) but the key describes {want:?}"
            )));
        }
        Ok(())
    }
}

/// Key-derived coefficient order and dither for one (frame, region, channel).
struct SlotKey {
    perm: Vec<usize>,
    dither: Vec<f64>,
}

fn slot_key(key: &KeyFile, frame: usize, region: usize, channel: usize, ll: usize) -> SlotKey {
    let mut rng = ChaCha8Rng::seed_from_u64(key.seed);
    let stream = ((frame * key.cap().max(1) + region) * key.channels + channel) as u64;
    rng.set_stream(stream);
    let mut perm: Vec<usize> = (0..ll).collect();
    perm.shuffle(&mut rng);
    let dither = (0..ll)
        .map(|_| rng.random_range(-key.delta..key.delta))
        .collect();
    SlotKey { perm, dither }
}

/// Bit sequences per channel for one patch.
fn region_payload(
    key: &KeyFile,
    layout: &[ChannelLayout],
    patch: &Plane,
    index: usize,
) -> Vec<Vec<u8>> {
    let codec_bits = {
        let k = key.bits;
        (0..k)
            .map(|j| ((index >> (k - 1 - j)) & 1) as u8)
            .collect::<Vec<_>>()
    };
    layout
        .iter()
        .enumerate()
        .map(|(c, l)| {
            let mut bits = if l.content_bits > 0 {
                content_bits(patch, c, key.bit_depth)
            } else {
                Vec::new()
            };
            for _ in 0..l.replicas {
                bits.extend_from_slice(&codec_bits);
            }
            bits
        })
        .collect()
}

fn ll_value(ll: &Plane, i: usize, c: usize) -> f64 {
    ll.data[i * ll.channels + c] as f64
}

/// QIM-embeds `payload` into the LL band of `region`, retrying targets that
/// clipping flipped.
fn embed_region(
    key: &KeyFile,
    region: &Plane,
    payload: &[Vec<u8>],
    keys: &[SlotKey],
) -> Result<Plane> {
    let delta = key.delta;
    let mut bands = dwt2(region)?;
    let ll0 = bands.ll.clone();
    // target lattice point per embedded coefficient, per channel
    let mut targets: Vec<Vec<f64>> = payload
        .iter()
        .enumerate()
        .map(|(c, bits)| {
            bits.iter()
                .enumerate()
                .map(|(q, &b)| {
                    let i = keys[c].perm[q];
                    let d = keys[c].dither[i];
                    qim_point(ll_value(&ll0, i, c) - d, b, delta) + d
                })
                .collect()
        })
        .collect();

    for attempt in 0..=CLIP_RETRIES {
        for (c, ts) in targets.iter().enumerate() {
            for (q, &t) in ts.iter().enumerate() {
                let i = keys[c].perm[q];
                bands.ll.data[i * region.channels + c] = t as f32;
            }
        }
        let mut out = idwt2(&bands)?;
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        let check = dwt2(&out)?.ll;
        let mut flipped = false;
        for (c, bits) in payload.iter().enumerate() {
            for (q, &b) in bits.iter().enumerate() {
                let i = keys[c].perm[q];
                let seen = ll_value(&check, i, c);
                if qim_bit(seen - keys[c].dither[i], delta) != b {
                    flipped = true;
                    let dir = if seen < targets[c][q] { -1.0 } else { 1.0 };
                    targets[c][q] += dir * 2.0 * delta;
                }
            }
        }
        if !flipped {
            return Ok(out);
        }
        if attempt == CLIP_RETRIES {
            break;
        }
    }
    Err(Error::Capacity(format!(
        "sample clipping still flips embedded bits after {CLIP_RETRIES} retries"
    )))
}

/// Embeds every planned patch; samples outside assigned regions are left
/// untouched.
pub fn embed(
    v: &FrameSequence,
    w: &WatermarkImage,
    plan: &AssignmentPlan,
    cfg: &QimConfig,
) -> Result<(FrameSequence, KeyFile)> {
    let key = KeyFile::derive(
        v.frames, v.height, v.width, v.channels, w.height, w.width, w.channels, cfg,
    )?;
    let patches = partition(w, cfg.patch_size)?;
    if patches.is_empty() {
        return Ok((v.clone(), key));
    }
    plan.validate()?;
    if plan.len() != patches.len() || plan.frames != v.frames || plan.grid != key.grid {
        return Err(Error::Geometry(format!(
            "plan ({} patches, {} frames, grid {:?}) does not match video/watermark \
             ({} patches, {} frames, grid {:?})",
            plan.len(),
            plan.frames,
            plan.grid,
            patches.len(),
            v.frames,
            key.grid
        )));
    }
    let layout = key.layout()?;

    let regions = plan
        .assignments
        .par_iter()
        .map(|a| {
            let (y0, x0, h, wd) = key.region(a.region);
            let region = v.frame(a.frame).crop(y0, x0, h, wd)?;
            let ll = (h / 2) * (wd / 2);
            let keys: Vec<SlotKey> = (0..v.channels)
                .map(|c| slot_key(&key, a.frame, a.region, c, ll))
                .collect();
            let payload = region_payload(&key, &layout, &patches.patches[a.patch], a.patch);
            let out = embed_region(&key, &region, &payload, &keys)?;
            Ok((a.frame, y0, x0, out))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut vol: Volume = (**v).clone();
    let mut frames = vol.planes();
    for (t, y0, x0, plane) in regions {
        frames[t].paste(&plane, y0, x0)?;
    }
    for (t, f) in frames.iter().enumerate() {
        vol.set_frame(t, f)?;
    }
    Ok((FrameSequence::new(vol)?, key))
}

/// Raw bits read from one slot, per channel.
fn read_slot(
    key: &KeyFile,
    layout: &[ChannelLayout],
    v: &FrameSequence,
    frame: usize,
    region: usize,
) -> Result<Vec<Vec<u8>>> {
    let (y0, x0, h, w) = key.region(region);
    let ll = dwt2(&v.frame(frame).crop(y0, x0, h, w)?)?.ll;
    let n = (h / 2) * (w / 2);
    Ok(layout
        .iter()
        .enumerate()
        .map(|(c, l)| {
            let sk = slot_key(key, frame, region, c, n);
            (0..l.total(key.bits))
                .map(|q| {
                    let i = sk.perm[q];
                    qim_bit(ll_value(&ll, i, c) - sk.dither[i], key.delta)
                })
                .collect()
        })
        .collect())
}

/// Renders `T` replica votes per bit into the position plane: within bit
/// `j`'s block of `b` cells, cell `o` averages replicas
/// `[⌊o·T/b⌋, max(⌊(o+1)·T/b⌋, ⌊o·T/b⌋ + 1))`.
pub fn render_position_plane(codec: &PositionCodec, votes: &[Vec<u8>]) -> Result<Plane> {
    let k = codec.bits;
    let t = votes.len();
    if t == 0 || votes.iter().any(|r| r.len() != k) {
        return Err(Error::dims(
            "position votes must be non-empty rows of K bits",
        ));
    }
    let cells = codec.cells();
    let mut data = vec![0f32; cells];
    let block = codec.block_len();
    for j in 0..k {
        let start = j * block;
        let end = if j + 1 == k { cells } else { start + block };
        let b = end - start;
        for o in 0..b {
            let lo = o * t / b;
            let hi = ((o + 1) * t / b).max(lo + 1).min(t);
            let sum: u32 = votes[lo..hi].iter().map(|r| r[j] as u32).sum();
            data[start + o] = sum as f32 / (hi - lo) as f32;
        }
    }
    Plane::from_vec(codec.patch_size, codec.patch_size, 1, data)
}

/// Blind extraction of every (frame, region) slot, in slot order.
pub fn extract(v: &FrameSequence, key: &KeyFile) -> Result<Vec<DecodedPatch>> {
    key.validate()?;
    key.check_video(v)?;
    if key.positions() == 0 {
        return Ok(Vec::new());
    }
    let layout = key.layout()?;
    let codec = PositionCodec::with_bits(key.positions(), key.patch_size, key.bits)?;
    let cap = key.cap();
    (0..key.slots())
        .into_par_iter()
        .map(|s| {
            let (frame, region) = (s / cap, s % cap);
            let bits = read_slot(key, &layout, v, frame, region)?;
            let ps = key.patch_size;
            let mut content = Plane::zeros(ps, ps, key.wm_channels);
            let mut votes = Vec::new();
            for (c, (l, b)) in layout.iter().zip(&bits).enumerate() {
                if l.content_bits > 0 {
                    for (sidx, chunk) in b[..l.content_bits].chunks(key.bit_depth).enumerate() {
                        let q = chunk.iter().fold(0u32, |acc, &x| (acc << 1) | x as u32);
                        content.data[sidx * key.wm_channels + c] =
                            dequantize_sample(q, key.bit_depth);
                    }
                }
                votes.extend(b[l.content_bits..].chunks(key.bits).map(|r| r.to_vec()));
            }
            let plane = render_position_plane(&codec, &votes)?;
            let d = codec.decode(&plane)?;
            Ok(DecodedPatch {
                content,
                prob: d.prob,
                confidence: d.confidence,
                index: d.index,
                frame,
                region,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_examples() {
        assert!((qim_point(0.33, 0, 0.1) - 0.4).abs() < 1e-12);
        assert!((qim_point(0.33, 1, 0.1) - 0.3).abs() < 1e-12);
        assert_eq!(qim_bit(0.4, 0.1), 0);
        assert_eq!(qim_bit(0.3, 0.1), 1);
        assert_eq!(qim_bit(-0.1, 0.1), 1);
        assert!(qim_embed_bits(&[0.0], &[0], 0.0).is_err());
        assert!(qim_embed_bits(&[0.0], &[0, 1], 0.1).is_err());
        assert!(qim_decode_bits(&[0.0], 2, 0.1).is_err());
    }

    #[test]
    fn untouched_tail_passes_through() {
        let c = [0.123, 0.456, 0.789];
        let e = qim_embed_bits(&c, &[1], 0.05).unwrap();
        assert_eq!(&e[1..], &c[1..]);
    }

    #[test]
    fn quantization_levels() {
        assert_eq!(quantize_sample(1.0, 4), 15);
        assert_eq!(quantize_sample(0.0, 4), 0);
        assert_eq!(dequantize_sample(15, 4), 1.0);
        let p = Plane::from_vec(1, 1, 1, vec![0.5]).unwrap();
        assert_eq!(content_bits(&p, 0, 4), vec![1, 0, 0, 0]);
    }

    #[test]
    fn default_geometry_capacity() {
        let key = KeyFile::derive(8, 320, 512, 3, 256, 256, 3, &QimConfig::default()).unwrap();
        assert_eq!(key.grid, (4, 8));
        assert_eq!(key.region(0), (0, 0, 80, 64));
        assert_eq!(key.min_ll(), 1280);
        assert_eq!(key.bits, 8);
        assert_eq!(key.replicas, 32);
        assert_eq!(key.total_replicas().unwrap(), 96);
        let gray = KeyFile::derive(8, 320, 512, 3, 256, 256, 1, &QimConfig::default()).unwrap();
        assert_eq!(
            gray.layout().unwrap(),
            vec![
                ChannelLayout {
                    content_bits: 1024,
                    replicas: 32
                },
                ChannelLayout {
                    content_bits: 0,
                    replicas: 160
                },
                ChannelLayout {
                    content_bits: 0,
                    replicas: 160
                },
            ]
        );
    }

    #[test]
    fn infeasible_geometry_rejected() {
        let cfg = QimConfig::default();
        // 8 frames of 64x64 cannot hold 32 patches each
        assert!(matches!(
            KeyFile::derive(8, 64, 64, 3, 256, 256, 3, &cfg),
            Err(Error::Capacity(_)) | Err(Error::Geometry(_))
        ));
        assert!(matches!(
            KeyFile::derive(8, 320, 512, 1, 256, 256, 3, &cfg),
            Err(Error::Capacity(_))
        ));
        assert!(matches!(
            KeyFile::derive(8, 320, 512, 3, 250, 250, 3, &cfg),
            Err(Error::NotDivisible { .. })
        ));
    }

    #[test]
    fn key_text_roundtrip() {
        let key = KeyFile::derive(2, 128, 128, 3, 32, 32, 1, &QimConfig::default()).unwrap();
        let text = key.to_text();
        assert!(text.contains("grid=1x2\n"));
        assert_eq!(KeyFile::parse(&text).unwrap(), key);
        assert!(KeyFile::parse(&text.replace("R=", "Q=")).is_err());
        assert!(KeyFile::parse(&format!("{text}extra=1\n")).is_err());
        let bad = text.replace(&format!("R={}", key.replicas), "R=1");
        assert!(KeyFile::parse(&bad).is_err());
    }

    #[test]
    fn render_exact_replica_split() {
        let codec = PositionCodec::new(256, 16).unwrap();
        let bits = codec.index_bits(77);
        let votes = vec![bits; 96];
        let plane = render_position_plane(&codec, &votes).unwrap();
        let d = codec.decode(&plane).unwrap();
        assert_eq!(d.index, 77);
        assert_eq!(d.confidence, 0.5);
        // fewer replicas than cells still fills every cell
        let few = vec![codec.index_bits(3); 5];
        assert_eq!(
            codec
                .decode(&render_position_plane(&codec, &few).unwrap())
                .unwrap()
                .index,
            3
        );
    }

    #[test]
    fn zero_size_watermark_is_identity() {
        let v = FrameSequence::new(Volume::filled(2, 32, 32, 3, 0.3)).unwrap();
        let w = WatermarkImage::new(Plane::zeros(0, 0, 3), 16).unwrap();
        let plan = AssignmentPlan {
            frames: 2,
            cap: 0,
            grid: (1, 1),
            assignments: vec![],
        };
        let (out, key) = embed(&v, &w, &plan, &QimConfig::default()).unwrap();
        assert_eq!(out, v);
        assert!(extract(&out, &key).unwrap().is_empty());
    }

    #[test]
    fn geometry_mismatch_on_extract() {
        let key = KeyFile::derive(2, 128, 128, 3, 32, 32, 1, &QimConfig::default()).unwrap();
        let v = FrameSequence::new(Volume::filled(2, 128, 96, 3, 0.3)).unwrap();
        assert!(matches!(extract(&v, &key), Err(Error::Geometry(_))));
    }
}
