//! Coarse-to-fine patch matching: the watermark is cut into patches, each
//! patch picks a frame (coarse) and then a region inside that frame (fine)
//! by feature similarity against an average-pooled proxy latent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{FrameSequence, Plane, WatermarkImage};

pub const DEFAULT_PATCH_SIZE: usize = 16;
pub const FEATURE_DIM: usize = 16;
pub const LATENT_POOL: usize = 8;
const KERNEL: usize = 3;

/// Row-major tiling of a watermark into square patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub patches: Vec<Plane>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Top-left corner of patch `i` in the watermark.
    pub fn origin(&self, i: usize) -> (usize, usize) {
        (
            (i / self.cols) * self.patch_size,
            (i % self.cols) * self.patch_size,
        )
    }

    /// Places `patches[i]` back at position `i`.
    pub fn reassemble(&self) -> Result<Plane> {
        reassemble(
            &self.patches,
            self.rows,
            self.cols,
            self.patch_size,
            self.channels,
        )
    }
}

/// Tiles `patches` (in position order) into a `rows × cols` grid.
pub fn reassemble(
    patches: &[Plane],
    rows: usize,
    cols: usize,
    patch_size: usize,
    channels: usize,
) -> Result<Plane> {
    if patches.len() != rows * cols {
        return Err(Error::dims(format!(
            "{} patches cannot fill a {rows}x{cols} grid",
            patches.len()
        )));
    }
    let mut out = Plane::zeros(rows * patch_size, cols * patch_size, channels);
    for (i, p) in patches.iter().enumerate() {
        out.paste(p, (i / cols) * patch_size, (i % cols) * patch_size)?;
    }
    Ok(out)
}

pub fn partition(w: &Plane, patch_size: usize) -> Result<PatchSet> {
    if patch_size == 0 {
        return Err(Error::param("patch size must be positive"));
    }
    if !w.height.is_multiple_of(patch_size) || !w.width.is_multiple_of(patch_size) {
        return Err(Error::NotDivisible {
            height: w.height,
            width: w.width,
            patch_size,
        });
    }
    let (rows, cols) = (w.height / patch_size, w.width / patch_size);
    let patches = (0..rows * cols)
        .map(|i| {
            w.crop(
                (i / cols) * patch_size,
                (i % cols) * patch_size,
                patch_size,
                patch_size,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchSet {
        patch_size,
        rows,
        cols,
        channels: w.channels,
        patches,
    })
}

/// 8×8 average pooling; edge blocks average only the pixels they cover.
pub fn proxy_latent(frame: &Plane) -> Plane {
    let (lh, lw) = (
        frame.height.div_ceil(LATENT_POOL),
        frame.width.div_ceil(LATENT_POOL),
    );
    let mut out = Plane::zeros(lh, lw, frame.channels);
    for by in 0..lh {
        for bx in 0..lw {
            let (y0, x0) = (by * LATENT_POOL, bx * LATENT_POOL);
            let (y1, x1) = (
                (y0 + LATENT_POOL).min(frame.height),
                (x0 + LATENT_POOL).min(frame.width),
            );
            let n = ((y1 - y0) * (x1 - x0)) as f32;
            for c in 0..frame.channels {
                let mut s = 0f32;
                for y in y0..y1 {
                    for x in x0..x1 {
                        s += frame.get(y, x, c);
                    }
                }
                out.set(by, bx, c, s / n);
            }
        }
    }
    out
}

pub fn proxy_latents(v: &FrameSequence) -> Vec<Plane> {
    (0..v.frames)
        .into_par_iter()
        .map(|t| proxy_latent(&v.frame(t)))
        .collect()
}

/// One seeded 3×3 valid convolution (zero bias) → ReLU → global average pool.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub channels: usize,
    pub dim: usize,
    /// dim × channels × 3 × 3
    pub weight: Vec<f32>,
}

impl FeatureExtractor {
    pub fn seeded(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = FEATURE_DIM * channels * KERNEL * KERNEL;
        FeatureExtractor {
            channels,
            dim: FEATURE_DIM,
            weight: (0..n).map(|_| rng.random_range(-0.1f32..=0.1)).collect(),
        }
    }

    /// Convolution responses before ReLU, one vector per valid position.
    fn responses(&self, x: &Plane) -> Result<Vec<Vec<f32>>> {
        if x.height == 0 || x.width == 0 {
            return Err(Error::dims("feature input is empty"));
        }
        // Tiles under 3×3 are edge-replicated up to the kernel size.
        let (h, w) = (x.height.max(KERNEL), x.width.max(KERNEL));
        let x = if x.channels == self.channels {
            x.clone()
        } else {
            x.with_channels(self.channels)
        };
        let sample =
            |y: usize, xx: usize, c: usize| x.get(y.min(x.height - 1), xx.min(x.width - 1), c);
        let mut out = Vec::with_capacity((h - 2) * (w - 2));
        for y in 0..h - 2 {
            for xx in 0..w - 2 {
                let mut r = vec![0f32; self.dim];
                for (o, slot) in r.iter_mut().enumerate() {
                    let mut acc = 0f32;
                    for c in 0..self.channels {
                        let base = (o * self.channels + c) * KERNEL * KERNEL;
                        for ky in 0..KERNEL {
                            for kx in 0..KERNEL {
                                acc += self.weight[base + ky * KERNEL + kx]
                                    * sample(y + ky, xx + kx, c);
                            }
                        }
                    }
                    *slot = acc;
                }
                out.push(r);
            }
        }
        Ok(out)
    }

    pub fn extract(&self, x: &Plane) -> Result<Vec<f32>> {
        let resp = self.responses(x)?;
        let mut f = vec![0f32; self.dim];
        for r in &resp {
            for (a, v) in f.iter_mut().zip(r) {
                *a += v.max(0.0);
            }
        }
        let n = resp.len() as f32;
        f.iter_mut().for_each(|v| *v /= n);
        Ok(f)
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Capacity-constrained greedy assignment. Patches go in descending order of
/// their best weight (ties → lower patch index); each takes its best slot with
/// capacity left (ties → lower slot index).
pub fn greedy_assign(weights: &[Vec<f64>], capacity: &[usize]) -> Result<Vec<usize>> {
    let best: Vec<f64> = weights
        .iter()
        .map(|w| w.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| best[b].total_cmp(&best[a]).then(a.cmp(&b)));

    let mut left = capacity.to_vec();
    let mut out = vec![usize::MAX; weights.len()];
    for i in order {
        let w = &weights[i];
        if w.len() != capacity.len() {
            return Err(Error::dims(format!(
                "patch {i} has {} scores for {} slots",
                w.len(),
                capacity.len()
            )));
        }
        let mut slots: Vec<usize> = (0..w.len()).collect();
        slots.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
        let slot = slots
            .into_iter()
            .find(|&s| left[s] > 0)
            .ok_or_else(|| Error::Capacity(format!("no slot left for patch {i}")))?;
        left[slot] -= 1;
        out[i] = slot;
    }
    Ok(out)
}

/// Per-patch choice plus the similarity weights it was derived from.
#[derive(Clone, Debug, PartialEq)]
pub struct Choice {
    pub slots: Vec<usize>,
    /// patch × slot, each row sums to 1
    pub weights: Vec<Vec<f64>>,
}

pub fn frame_capacity(patches: usize, frames: usize) -> usize {
    if frames == 0 {
        0
    } else {
        patches.div_ceil(frames)
    }
}

/// `w[i][j] = softmax_j(feat(p_i) · feat(z_j))`, then greedy under `cap`.
pub fn coarse_assign_features(
    patch_feats: &[Vec<f32>],
    latent_feats: &[Vec<f32>],
) -> Result<Choice> {
    if latent_feats.is_empty() {
        return Err(Error::dims("coarse assignment needs at least one frame"));
    }
    let cap = frame_capacity(patch_feats.len(), latent_feats.len());
    let weights: Vec<Vec<f64>> = patch_feats
        .iter()
        .map(|p| softmax(&latent_feats.iter().map(|z| dot(p, z)).collect::<Vec<_>>()))
        .collect();
    let slots = greedy_assign(&weights, &vec![cap; latent_feats.len()])?;
    Ok(Choice { slots, weights })
}

pub fn coarse_assign(
    patches: &PatchSet,
    latents: &[Plane],
    extractor: &FeatureExtractor,
) -> Result<Choice> {
    let pf = features(&patches.patches, extractor)?;
    let lf = features(latents, extractor)?;
    coarse_assign_features(&pf, &lf)
}

/// Near-square factorization `g_h × g_w = cap` with `g_h ≤ g_w`.
pub fn region_grid(cap: usize) -> (usize, usize) {
    if cap == 0 {
        return (1, 1);
    }
    let mut gh = (cap as f64).sqrt() as usize;
    while gh > 1 && !cap.is_multiple_of(gh) {
        gh -= 1;
    }
    let gh = gh.max(1);
    (gh, cap / gh)
}

/// Bounds `(y0, x0, h, w)` of region `k` in an equal `grid` tiling of a
/// `height × width` plane.
pub fn region_bounds(
    height: usize,
    width: usize,
    grid: (usize, usize),
    k: usize,
) -> (usize, usize, usize, usize) {
    let (gh, gw) = grid;
    let (ry, rx) = (k / gw, k % gw);
    let y0 = ry * height / gh;
    let y1 = (ry + 1) * height / gh;
    let x0 = rx * width / gw;
    let x1 = (rx + 1) * width / gw;
    (y0, x0, y1 - y0, x1 - x0)
}

pub fn region_tiles(latent: &Plane, grid: (usize, usize)) -> Result<Vec<Plane>> {
    let (gh, gw) = grid;
    if gh == 0 || gw == 0 || latent.height < gh || latent.width < gw {
        return Err(Error::Geometry(format!(
            "latent {}x{} cannot hold a {gh}x{gw} region grid",
            latent.height, latent.width
        )));
    }
    (0..gh * gw)
        .map(|k| {
            let (y0, x0, h, w) = region_bounds(latent.height, latent.width, grid, k);
            latent.crop(y0, x0, h, w)
        })
        .collect()
}

/// `s[i][k] = softmax_k(feat(p_i) · feat(r_k))`, then greedy with one patch
/// per region.
pub fn fine_assign_features(patch_feats: &[Vec<f32>], region_feats: &[Vec<f32>]) -> Result<Choice> {
    if patch_feats.len() > region_feats.len() {
        return Err(Error::Capacity(format!(
            "{} patches for {} regions",
            patch_feats.len(),
            region_feats.len()
        )));
    }
    let weights: Vec<Vec<f64>> = patch_feats
        .iter()
        .map(|p| softmax(&region_feats.iter().map(|r| dot(p, r)).collect::<Vec<_>>()))
        .collect();
    let slots = greedy_assign(&weights, &vec![1; region_feats.len()])?;
    Ok(Choice { slots, weights })
}

pub fn fine_assign(
    patches: &[Plane],
    latent: &Plane,
    grid: (usize, usize),
    extractor: &FeatureExtractor,
) -> Result<Choice> {
    let pf = features(patches, extractor)?;
    let rf = features(&region_tiles(latent, grid)?, extractor)?;
    fine_assign_features(&pf, &rf)
}

fn features(xs: &[Plane], extractor: &FeatureExtractor) -> Result<Vec<Vec<f32>>> {
    xs.par_iter().map(|x| extractor.extract(x)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Assignment {
    pub patch: usize,
    pub frame: usize,
    pub region: usize,
}

/// Patch → (frame, region) mapping with its capacity geometry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssignmentPlan {
    pub frames: usize,
    pub cap: usize,
    pub grid: (usize, usize),
    /// indexed by patch
    pub assignments: Vec<Assignment>,
}

impl AssignmentPlan {
    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let cells = self.grid.0 * self.grid.1;
        if cells != self.cap.max(1) && !(self.cap == 0 && self.assignments.is_empty()) {
            return Err(Error::Invariant(format!(
                "grid {}x{} does not match capacity {}",
                self.grid.0, self.grid.1, self.cap
            )));
        }
        let mut used = vec![false; self.frames * cells];
        let mut per_frame = vec![0usize; self.frames];
        for (i, a) in self.assignments.iter().enumerate() {
            if a.patch != i || a.frame >= self.frames || a.region >= cells {
                return Err(Error::Invariant(format!("bad assignment {a:?} at {i}")));
            }
            let slot = a.frame * cells + a.region;
            if used[slot] {
                return Err(Error::Invariant(format!(
                    "slot ({}, {}) used twice",
                    a.frame, a.region
                )));
            }
            used[slot] = true;
            per_frame[a.frame] += 1;
            if per_frame[a.frame] > self.cap {
                return Err(Error::Invariant(format!("frame {} over capacity", a.frame)));
            }
        }
        Ok(())
    }

    /// One `i j k` line per patch.
    pub fn to_text(&self) -> String {
        self.assignments
            .iter()
            .map(|a| format!("{} {} {}\n", a.patch, a.frame, a.region))
            .collect()
    }
}

pub fn parse_assignments(text: &str) -> Result<Vec<Assignment>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: Vec<usize> = l
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse("plan", format!("{l:?}: {e}")))?;
            match v[..] {
                [patch, frame, region] => Ok(Assignment {
                    patch,
                    frame,
                    region,
                }),
                _ => Err(Error::parse("plan", format!("expected 3 fields: {l:?}"))),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchConfig {
    pub patch_size: usize,
    pub seed: u64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            patch_size: DEFAULT_PATCH_SIZE,
            seed: 0,
        }
    }
}

/// partition → proxy latents → coarse → fine.
pub fn plan(w: &WatermarkImage, v: &FrameSequence, cfg: &MatchConfig) -> Result<AssignmentPlan> {
    let patches = partition(w, cfg.patch_size)?;
    let frames = v.frames;
    let p = patches.len();
    if p == 0 {
        return Ok(AssignmentPlan {
            frames,
            cap: 0,
            grid: (1, 1),
            assignments: Vec::new(),
        });
    }
    let cap = frame_capacity(p, frames);
    let grid = region_grid(cap);
    let extractor = FeatureExtractor::seeded(v.channels, cfg.seed);
    let latents = proxy_latents(v);
    let patch_feats = features(&patches.patches, &extractor)?;
    let latent_feats = features(&latents, &extractor)?;
    let coarse = coarse_assign_features(&patch_feats, &latent_feats)?;

    let mut assignments = vec![
        Assignment {
            patch: 0,
            frame: 0,
            region: 0
        };
        p
    ];
    for (j, latent) in latents.iter().enumerate() {
        let members: Vec<usize> = (0..p).filter(|&i| coarse.slots[i] == j).collect();
        if members.is_empty() {
            continue;
        }
        let region_feats = features(&region_tiles(latent, grid)?, &extractor)?;
        let pf: Vec<Vec<f32>> = members.iter().map(|&i| patch_feats[i].clone()).collect();
        let fine = fine_assign_features(&pf, &region_feats)?;
        for (m, &i) in members.iter().enumerate() {
            assignments[i] = Assignment {
                patch: i,
                frame: j,
                region: fine.slots[m],
            };
        }
    }
    let plan = AssignmentPlan {
        frames,
        cap,
        grid,
        assignments,
    };
    plan.validate()?;
    Ok(plan)
}
