//! Selective state-space scan and forward-only spatial-frequency blocks.
//!
//! The recurrence, per channel `d` and state index `n`:
//!
//! ```text
//! h[t,d,n] = Ā[t,d,n] · h[t-1,d,n] + B̄[t,d,n] · x[t,d]
//! y[t,d]   = Σ_n C[t,n] · h[t,d,n] + D[d] · x[t,d]
//! ```
//!
//! with `h[-1] = 0`. Parameters are either projected from the input
//! (`Ā = exp(-softplus(x·W_dt + b_dt) · A_base)`, `B̄ = Δ · (x·W_B)`,
//! `C = x·W_C`) or held fixed.
//!
//! Sequences are token-major: a length-`L` sequence of `D`-channel tokens is a
//! flat slice of `L * D` values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scanning::{scan_2d_freq, scan_3d_local, scan_3d_vanilla, ApplyMode, ScanDirection};
use crate::tensor::{Plane, Volume};
use crate::wavelet::{dwt2, dwt3, idwt2, idwt3, mosaic2, mosaic3, unmosaic2, unmosaic3};

const INIT_RANGE: f32 = 0.1;
pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Discretized per-step parameters of one scan.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    pub len: usize,
    pub channels: usize,
    pub state_dim: usize,
    /// L×D×N
    pub a_bar: Vec<f32>,
    /// L×D×N
    pub b_bar: Vec<f32>,
    /// L×N, shared by all channels
    pub c: Vec<f32>,
    /// D
    pub d_skip: Vec<f32>,
}

impl SsmParams {
    /// Input-independent parameters with every entry set to one value.
    pub fn constant(
        len: usize,
        channels: usize,
        state_dim: usize,
        a_bar: f32,
        b_bar: f32,
        c: f32,
        d_skip: f32,
    ) -> Self {
        SsmParams {
            len,
            channels,
            state_dim,
            a_bar: vec![a_bar; len * channels * state_dim],
            b_bar: vec![b_bar; len * channels * state_dim],
            c: vec![c; len * state_dim],
            d_skip: vec![d_skip; channels],
        }
    }

    fn validate(&self) -> Result<()> {
        let (l, d, n) = (self.len, self.channels, self.state_dim);
        if self.a_bar.len() != l * d * n
            || self.b_bar.len() != l * d * n
            || self.c.len() != l * n
            || self.d_skip.len() != d
        {
            return Err(Error::dims(format!(
                "ssm params inconsistent with L={l}, D={d}, N={n}"
            )));
        }
        Ok(())
    }
}

fn check_finite(what: &'static str, data: &[f32]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Runs the selective scan over an L×D sequence. Channels are independent
/// and processed in parallel; the state is accumulated in f64.
pub fn selective_scan(x: &[f32], params: &SsmParams) -> Result<Vec<f32>> {
    params.validate()?;
    let (l, d, n) = (params.len, params.channels, params.state_dim);
    if x.len() != l * d {
        return Err(Error::dims(format!(
            "scan input has {} values, expected {l}x{d}",
            x.len()
        )));
    }
    check_finite("scan input", x)?;

    let per_channel: Vec<Vec<f32>> = (0..d)
        .into_par_iter()
        .map(|ch| {
            let mut h = vec![0f64; n];
            let mut y = Vec::with_capacity(l);
            for t in 0..l {
                let xt = x[t * d + ch] as f64;
                let base = (t * d + ch) * n;
                let a = &params.a_bar[base..base + n];
                let b = &params.b_bar[base..base + n];
                let c = &params.c[t * n..(t + 1) * n];
                let mut acc = 0f64;
                for k in 0..n {
                    h[k] = a[k] as f64 * h[k] + b[k] as f64 * xt;
                    acc += c[k] as f64 * h[k];
                }
                y.push((acc + params.d_skip[ch] as f64 * xt) as f32);
            }
            y
        })
        .collect();

    let mut out = vec![0f32; l * d];
    for (ch, ys) in per_channel.into_iter().enumerate() {
        for (t, v) in ys.into_iter().enumerate() {
            out[t * d + ch] = v;
        }
    }
    Ok(out)
}

#[inline]
fn softplus(z: f32) -> f32 {
    if z > 20.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
pub fn silu(z: f32) -> f32 {
    z / (1.0 + (-z).exp())
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| rng.random_range(-INIT_RANGE..=INIT_RANGE))
        .collect()
}

/// Projection weights that turn an input sequence into [`SsmParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct SsmWeights {
    pub channels: usize,
    pub state_dim: usize,
    /// D×D, row = input channel
    pub dt_proj: Vec<f32>,
    pub dt_bias: Vec<f32>,
    /// D×N
    pub b_proj: Vec<f32>,
    /// D×N
    pub c_proj: Vec<f32>,
    /// N, positive
    pub a_base: Vec<f32>,
    pub d_skip: Vec<f32>,
}

impl SsmWeights {
    /// Uniform `[-0.1, 0.1]` projections, zero bias, `A_base = 1..=N`, unit skip.
    pub fn seeded(channels: usize, state_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SsmWeights {
            channels,
            state_dim,
            dt_proj: uniform(&mut rng, channels * channels),
            dt_bias: vec![0.0; channels],
            b_proj: uniform(&mut rng, channels * state_dim),
            c_proj: uniform(&mut rng, channels * state_dim),
            a_base: (1..=state_dim).map(|v| v as f32).collect(),
            d_skip: vec![1.0; channels],
        }
    }

    /// All projections and the skip term zero; the scan then outputs zeros.
    pub fn zeros(channels: usize, state_dim: usize) -> Self {
        SsmWeights {
            channels,
            state_dim,
            dt_proj: vec![0.0; channels * channels],
            dt_bias: vec![0.0; channels],
            b_proj: vec![0.0; channels * state_dim],
            c_proj: vec![0.0; channels * state_dim],
            a_base: (1..=state_dim).map(|v| v as f32).collect(),
            d_skip: vec![0.0; channels],
        }
    }
}

/// Computes input-dependent parameters. Each step's parameters depend only
/// on that step's token.
pub fn input_projection(x: &[f32], len: usize, w: &SsmWeights) -> Result<SsmParams> {
    let (d, n) = (w.channels, w.state_dim);
    if x.len() != len * d {
        return Err(Error::dims(format!(
            "projection input has {} values, expected {len}x{d}",
            x.len()
        )));
    }
    let mut a_bar = vec![0f32; len * d * n];
    let mut b_bar = vec![0f32; len * d * n];
    let mut c = vec![0f32; len * n];
    let mut dt = vec![0f32; d];
    let mut bvec = vec![0f32; n];
    for t in 0..len {
        let xt = &x[t * d..(t + 1) * d];
        for (o, slot) in dt.iter_mut().enumerate() {
            let z: f32 = (0..d).map(|i| xt[i] * w.dt_proj[i * d + o]).sum();
            *slot = softplus(z + w.dt_bias[o]);
        }
        for k in 0..n {
            bvec[k] = (0..d).map(|i| xt[i] * w.b_proj[i * n + k]).sum();
            c[t * n + k] = (0..d).map(|i| xt[i] * w.c_proj[i * n + k]).sum();
        }
        for ch in 0..d {
            let base = (t * d + ch) * n;
            for k in 0..n {
                a_bar[base + k] = (-dt[ch] * w.a_base[k]).exp();
                b_bar[base + k] = dt[ch] * bvec[k];
            }
        }
    }
    Ok(SsmParams {
        len,
        channels: d,
        state_dim: n,
        a_bar,
        b_bar,
        c,
        d_skip: w.d_skip.clone(),
    })
}

/// How a block obtains its scan parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum ScanKernel {
    Selective(SsmWeights),
    Fixed {
        state_dim: usize,
        a_bar: f32,
        b_bar: f32,
        c: f32,
        d_skip: f32,
    },
}

impl ScanKernel {
    /// `Ā = 0, B̄ = 1, C = 1, D = 0` with one state: the scan returns its input.
    pub fn identity_like() -> Self {
        ScanKernel::Fixed {
            state_dim: 1,
            a_bar: 0.0,
            b_bar: 1.0,
            c: 1.0,
            d_skip: 0.0,
        }
    }

    pub fn params(&self, x: &[f32], len: usize) -> Result<SsmParams> {
        match self {
            ScanKernel::Selective(w) => input_projection(x, len, w),
            &ScanKernel::Fixed {
                state_dim,
                a_bar,
                b_bar,
                c,
                d_skip,
            } => {
                if len == 0 || !x.len().is_multiple_of(len) {
                    return Err(Error::dims("fixed kernel: sequence length mismatch"));
                }
                Ok(SsmParams::constant(
                    len,
                    x.len() / len,
                    state_dim,
                    a_bar,
                    b_bar,
                    c,
                    d_skip,
                ))
            }
        }
    }

    pub fn run(&self, x: &[f32], len: usize) -> Result<Vec<f32>> {
        selective_scan(x, &self.params(x, len)?)
    }
}

/// Seeded feature map with entries uniform in `[-amplitude, amplitude]`.
pub fn random_feature_map(
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    amplitude: f32,
    seed: u64,
) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = frames * height * width * channels;
    let data = (0..n)
        .map(|_| rng.random_range(-amplitude..=amplitude))
        .collect();
    Volume::from_vec(frames, height, width, channels, data).expect("sizes agree")
}

/// Pointwise (1×1) convolution over token-major data.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1x1 {
    pub in_channels: usize,
    pub out_channels: usize,
    /// out×in
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv1x1 {
    pub fn seeded(in_channels: usize, out_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Conv1x1 {
            in_channels,
            out_channels,
            weight: uniform(&mut rng, in_channels * out_channels),
            bias: vec![0.0; out_channels],
        }
    }

    pub fn apply(&self, x: &[f32]) -> Result<Vec<f32>> {
        let (ci, co) = (self.in_channels, self.out_channels);
        if !x.len().is_multiple_of(ci) {
            return Err(Error::dims("conv1x1 input not a multiple of channels"));
        }
        let tokens = x.len() / ci;
        let mut out = vec![0f32; tokens * co];
        for p in 0..tokens {
            let xt = &x[p * ci..(p + 1) * ci];
            for o in 0..co {
                let row = &self.weight[o * ci..(o + 1) * ci];
                out[p * co + o] =
                    self.bias[o] + row.iter().zip(xt).map(|(w, v)| w * v).sum::<f32>();
            }
        }
        Ok(out)
    }
}

/// LayerNorm over the channel dimension of each token.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(channels: usize) -> Self {
        LayerNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn apply(&self, x: &[f32]) -> Vec<f32> {
        let d = self.gamma.len();
        let mut out = vec![0f32; x.len()];
        for (src, dst) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = src.iter().sum::<f32>() / d as f32;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let inv = 1.0 / (var + self.eps).sqrt();
            for k in 0..d {
                dst[k] = (src[k] - mean) * inv * self.gamma[k] + self.beta[k];
            }
        }
        out
    }
}

fn concat_channels(a: &[f32], b: &[f32], d: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    for (x, y) in a.chunks_exact(d).zip(b.chunks_exact(d)) {
        out.extend_from_slice(x);
        out.extend_from_slice(y);
    }
    out
}

fn hadamard(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

fn check_block_input(what: &'static str, v: &Volume, channels: usize) -> Result<()> {
    if v.channels != channels {
        return Err(Error::dims(format!(
            "{what}: input has {} channels, block expects {channels}",
            v.channels
        )));
    }
    if !v.height.is_multiple_of(2) || !v.width.is_multiple_of(2) || v.height == 0 || v.width == 0 {
        return Err(Error::dims(format!(
            "{what}: spatial dims {}x{} must be even",
            v.height, v.width
        )));
    }
    check_finite(what, &v.data)
}

/// LayerNorm output and its SiLU gate, shared by both branches.
pub struct Normalized {
    pub f_n: Vec<f32>,
    pub gate: Vec<f32>,
}

fn normalize(norm: &LayerNorm, x: &[f32]) -> Normalized {
    let f_n = norm.apply(x);
    let gate = f_n.iter().map(|&v| silu(v)).collect();
    Normalized { f_n, gate }
}

/// 2D spatial-frequency block. Frames of the input volume are treated as
/// independent batch items.
#[derive(Clone, Debug, PartialEq)]
pub struct SfMamba2d {
    pub channels: usize,
    pub norm: LayerNorm,
    pub in_proj: Conv1x1,
    pub spatial: ScanKernel,
    pub freq: ScanKernel,
    pub out_proj: Conv1x1,
}

impl SfMamba2d {
    pub fn seeded(channels: usize, state_dim: usize, seed: u64) -> Self {
        SfMamba2d {
            channels,
            norm: LayerNorm::new(channels),
            in_proj: Conv1x1::seeded(channels, channels, seed),
            spatial: ScanKernel::Selective(SsmWeights::seeded(channels, state_dim, seed ^ 0x11)),
            freq: ScanKernel::Selective(SsmWeights::seeded(channels, state_dim, seed ^ 0x22)),
            out_proj: Conv1x1::seeded(2 * channels, channels, seed ^ 0x33),
        }
    }

    pub fn normalize(&self, frame: &Plane) -> Normalized {
        normalize(&self.norm, &frame.data)
    }

    /// `SiLU(F_N) ⊙ SSM(Conv1x1(F_N)) + F_in`, raster scan.
    pub fn spatial_branch(&self, f_in: &Plane, n: &Normalized) -> Result<Vec<f32>> {
        let u = self.in_proj.apply(&n.f_n)?;
        let y = self.spatial.run(&u, f_in.pixels())?;
        Ok(hadamard(&n.gate, &y)
            .iter()
            .zip(&f_in.data)
            .map(|(g, x)| g + x)
            .collect())
    }

    /// `SiLU(F_N) ⊙ IDWT(SSM(DWT(F_N)))`, scanning the subband mosaic block
    /// by block.
    pub fn frequency_branch(&self, frame: &Plane, n: &Normalized) -> Result<Vec<f32>> {
        let (h, w, d) = (frame.height, frame.width, frame.channels);
        let f_n = Plane::from_vec(h, w, d, n.f_n.clone())?;
        let mosaic = mosaic2(&dwt2(&f_n)?)?;
        let order = scan_2d_freq(h, w)?;
        let seq = order.apply_rows(&mosaic.data, d, ApplyMode::Gather)?;
        let y = self.freq.run(&seq, h * w)?;
        let back = Plane::from_vec(h, w, d, order.apply_rows(&y, d, ApplyMode::Scatter)?)?;
        let spatial = idwt2(&unmosaic2(&back)?)?;
        Ok(hadamard(&n.gate, &spatial.data))
    }

    pub fn forward_frame(&self, frame: &Plane) -> Result<Plane> {
        let n = self.normalize(frame);
        let f_s = self.spatial_branch(frame, &n)?;
        let f_f = self.frequency_branch(frame, &n)?;
        let out = self
            .out_proj
            .apply(&concat_channels(&f_s, &f_f, self.channels))?;
        Plane::from_vec(frame.height, frame.width, self.channels, out)
    }

    pub fn forward(&self, f_in: &Volume) -> Result<Volume> {
        check_block_input("sfmamba2d", f_in, self.channels)?;
        let frames = (0..f_in.frames)
            .into_par_iter()
            .map(|t| self.forward_frame(&f_in.frame(t)))
            .collect::<Result<Vec<_>>>()?;
        let out = Volume::from_planes(&frames)?;
        check_finite("sfmamba2d output", &out.data)?;
        Ok(out)
    }
}

/// 3D spatial-frequency block: vanilla raster scan in the spatial branch,
/// spatiotemporal local scan over the 3D subband mosaic in the frequency
/// branch, one kernel per direction with outputs summed.
#[derive(Clone, Debug, PartialEq)]
pub struct SfMamba3d {
    pub channels: usize,
    pub norm: LayerNorm,
    pub in_proj: Conv1x1,
    pub spatial: ScanKernel,
    pub freq_forward: ScanKernel,
    pub freq_reverse: ScanKernel,
    pub out_proj: Conv1x1,
}

pub const BOTH_DIRECTIONS: [ScanDirection; 2] = [ScanDirection::Forward, ScanDirection::Reverse];

impl SfMamba3d {
    pub fn seeded(channels: usize, state_dim: usize, seed: u64) -> Self {
        SfMamba3d {
            channels,
            norm: LayerNorm::new(channels),
            in_proj: Conv1x1::seeded(channels, channels, seed),
            spatial: ScanKernel::Selective(SsmWeights::seeded(channels, state_dim, seed ^ 0x11)),
            freq_forward: ScanKernel::Selective(SsmWeights::seeded(
                channels,
                state_dim,
                seed ^ 0x22,
            )),
            freq_reverse: ScanKernel::Selective(SsmWeights::seeded(
                channels,
                state_dim,
                seed ^ 0x44,
            )),
            out_proj: Conv1x1::seeded(2 * channels, channels, seed ^ 0x33),
        }
    }

    pub fn normalize(&self, f_in: &Volume) -> Normalized {
        normalize(&self.norm, &f_in.data)
    }

    pub fn spatial_branch(&self, f_in: &Volume, n: &Normalized) -> Result<Vec<f32>> {
        let u = self.in_proj.apply(&n.f_n)?;
        let order = scan_3d_vanilla(f_in.frames, f_in.height, f_in.width);
        let seq = order.apply_rows(&u, self.channels, ApplyMode::Gather)?;
        let y = self.spatial.run(&seq, order.len())?;
        let y = order.apply_rows(&y, self.channels, ApplyMode::Scatter)?;
        Ok(hadamard(&n.gate, &y)
            .iter()
            .zip(&f_in.data)
            .map(|(g, x)| g + x)
            .collect())
    }

    pub fn frequency_branch(
        &self,
        f_in: &Volume,
        n: &Normalized,
        directions: &[ScanDirection],
    ) -> Result<Vec<f32>> {
        if directions.is_empty() {
            return Err(Error::param("at least one scan direction is required"));
        }
        let [f, h, w, d] = f_in.shape();
        let f_n = Volume::from_vec(f, h, w, d, n.f_n.clone())?;
        let mosaic = mosaic3(&dwt3(&f_n)?)?;
        let mut acc = vec![0f32; mosaic.data.len()];
        for &dir in directions {
            let order = scan_3d_local(f, h, w, dir)?;
            let kernel = match dir {
                ScanDirection::Forward => &self.freq_forward,
                ScanDirection::Reverse => &self.freq_reverse,
            };
            let seq = order.apply_rows(&mosaic.data, d, ApplyMode::Gather)?;
            let y = kernel.run(&seq, order.len())?;
            let y = order.apply_rows(&y, d, ApplyMode::Scatter)?;
            for (a, v) in acc.iter_mut().zip(y) {
                *a += v;
            }
        }
        let spatial = idwt3(&unmosaic3(&Volume::from_vec(f, h, w, d, acc)?)?)?;
        Ok(hadamard(&n.gate, &spatial.data))
    }

    pub fn forward(&self, f_in: &Volume, directions: &[ScanDirection]) -> Result<Volume> {
        check_block_input("sfmamba3d", f_in, self.channels)?;
        if !f_in.frames.is_multiple_of(2) {
            return Err(Error::dims(format!(
                "sfmamba3d: {} frames must be even",
                f_in.frames
            )));
        }
        let n = self.normalize(f_in);
        let f_s = self.spatial_branch(f_in, &n)?;
        let f_f = self.frequency_branch(f_in, &n, directions)?;
        let out = self
            .out_proj
            .apply(&concat_channels(&f_s, &f_f, self.channels))?;
        check_finite("sfmamba3d output", &out)?;
        Volume::from_vec(f_in.frames, f_in.height, f_in.width, self.channels, out)
    }
}

/// A chain of 3D blocks, each scanning in both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct SfMambaStack {
    pub blocks: Vec<SfMamba3d>,
}

impl SfMambaStack {
    pub fn seeded(depth: usize, channels: usize, state_dim: usize, seed: u64) -> Self {
        SfMambaStack {
            blocks: (0..depth)
                .map(|i| SfMamba3d::seeded(channels, state_dim, seed.wrapping_add(1000 * i as u64)))
                .collect(),
        }
    }

    /// Two blocks, as on the embedding side.
    pub fn embed_network(channels: usize, state_dim: usize, seed: u64) -> Self {
        Self::seeded(2, channels, state_dim, seed)
    }

    /// Four blocks, as on the extraction side.
    pub fn extract_network(channels: usize, state_dim: usize, seed: u64) -> Self {
        Self::seeded(4, channels, state_dim, seed)
    }

    pub fn forward(&self, x: &Volume) -> Result<Volume> {
        let mut cur = x.clone();
        for block in &self.blocks {
            cur = block.forward(&cur, &BOTH_DIRECTIONS)?;
        }
        Ok(cur)
    }
}
