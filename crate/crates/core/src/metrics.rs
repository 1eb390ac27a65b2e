//! PSNR, MAE, RMSE, SSIM and the weighted video/watermark loss.

use std::fmt;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::{Plane, Volume};

pub const DEFAULT_LAMBDA: f64 = 0.75;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_len(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dims(format!(
            "metric inputs differ in size: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn mse_pair(a: &[f32], b: &[f32]) -> Result<f64> {
    check_len(a, b)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    Ok(s / a.len() as f64)
}

pub fn mae(a: &[f32], b: &[f32]) -> Result<f64> {
    check_len(a, b)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .sum();
    Ok(s / a.len() as f64)
}

pub fn rmse(a: &[f32], b: &[f32]) -> Result<f64> {
    Ok(mse_pair(a, b)?.sqrt())
}

/// Peak signal-to-noise ratio for unit dynamic range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Identical,
    Db(f64),
}

impl Psnr {
    pub fn from_mse(mse: f64) -> Self {
        if mse == 0.0 {
            Psnr::Identical
        } else {
            Psnr::Db(10.0 * (1.0 / mse).log10())
        }
    }

    /// `f64::INFINITY` for identical inputs.
    pub fn db(self) -> f64 {
        match self {
            Psnr::Identical => f64::INFINITY,
            Psnr::Db(v) => v,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Identical => f.write_str("identical"),
            Psnr::Db(v) => write!(f, "{v:.4}"),
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Identical => s.serialize_str("identical"),
            Psnr::Db(v) => s.serialize_f64(*v),
        }
    }
}

pub fn psnr(a: &[f32], b: &[f32]) -> Result<Psnr> {
    Ok(Psnr::from_mse(mse_pair(a, b)?))
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid separable filtering of an `h × w` field.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0f64; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            tmp[y * ow + xo] = (0..n).map(|i| k[i] * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0f64; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..n).map(|i| k[i] * tmp[(yo + i) * ow + xo]).sum();
        }
    }
    out
}

/// Mean SSIM of one channel. The window shrinks to the largest odd size
/// that fits images smaller than 11×11.
fn ssim_channel(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size.is_multiple_of(2) {
        size -= 1;
    }
    let k = gaussian_window(size.max(1));
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let s_aa = filter_valid(&aa, h, w, &k);
    let s_bb = filter_valid(&bb, h, w, &k);
    let s_ab = filter_valid(&ab, h, w, &k);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = s_aa[i] - ma * ma;
            let vb = s_bb[i] - mb * mb;
            let cov = s_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    total / n as f64
}

fn channel(p: &Plane, c: usize) -> Vec<f64> {
    p.data
        .iter()
        .skip(c)
        .step_by(p.channels)
        .map(|&v| v as f64)
        .collect()
}

/// SSIM averaged over channels.
pub fn ssim_plane(a: &Plane, b: &Plane) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::dims("ssim inputs differ in shape"));
    }
    if a.pixels() == 0 {
        return Ok(1.0);
    }
    let s: f64 = (0..a.channels)
        .map(|c| ssim_channel(&channel(a, c), &channel(b, c), a.height, a.width))
        .sum();
    Ok(s / a.channels as f64)
}

/// SSIM averaged over frames and channels.
pub fn ssim_volume(a: &Volume, b: &Volume) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::dims("ssim inputs differ in shape"));
    }
    if a.frames == 0 {
        return Ok(1.0);
    }
    let per: Vec<f64> = (0..a.frames)
        .into_par_iter()
        .map(|t| ssim_plane(&a.frame(t), &b.frame(t)))
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / a.frames as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct QualityScores {
    pub psnr: Psnr,
    pub mae: f64,
    pub rmse: f64,
    pub ssim: f64,
}

impl QualityScores {
    fn from_data(a: &[f32], b: &[f32], ssim: f64) -> Result<Self> {
        Ok(QualityScores {
            psnr: psnr(a, b)?,
            mae: mae(a, b)?,
            rmse: rmse(a, b)?,
            ssim,
        })
    }

    pub fn volumes(a: &Volume, b: &Volume) -> Result<Self> {
        Self::from_data(&a.data, &b.data, ssim_volume(a, b)?)
    }

    pub fn planes(a: &Plane, b: &Plane) -> Result<Self> {
        Self::from_data(&a.data, &b.data, ssim_plane(a, b)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Losses {
    pub l_video: f64,
    pub l_watermark: f64,
    pub l_total: f64,
    pub lambda: f64,
}

impl Losses {
    pub fn new(l_video: f64, l_watermark: f64, lambda: f64) -> Self {
        Losses {
            l_video,
            l_watermark,
            l_total: l_video + lambda * l_watermark,
            lambda,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub video: QualityScores,
    pub watermark: QualityScores,
    pub losses: Losses,
}

impl MetricsReport {
    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (name, q) in [("video", &self.video), ("watermark", &self.watermark)] {
            let _ = writeln!(s, "{name}.psnr={}", q.psnr);
            let _ = writeln!(s, "{name}.mae={:.6}", q.mae);
            let _ = writeln!(s, "{name}.rmse={:.6}", q.rmse);
            let _ = writeln!(s, "{name}.ssim={:.6}", q.ssim);
        }
        let l = &self.losses;
        let _ = writeln!(s, "loss.video={:.8}", l.l_video);
        let _ = writeln!(s, "loss.watermark={:.8}", l.l_watermark);
        let _ = writeln!(s, "loss.total={:.8}", l.l_total);
        let _ = writeln!(s, "loss.lambda={}", l.lambda);
        s
    }
}

pub fn evaluate(
    v: &Volume,
    v_hat: &Volume,
    w: &Plane,
    w_hat: &Plane,
    lambda: f64,
) -> Result<MetricsReport> {
    if !v.same_shape(v_hat) || !w.same_shape(w_hat) {
        return Err(Error::dims("evaluate: paired inputs differ in shape"));
    }
    let video = QualityScores::volumes(v, v_hat)?;
    let watermark = QualityScores::planes(w, w_hat)?;
    let losses = Losses::new(
        mse_pair(&v.data, &v_hat.data)?,
        mse_pair(&w.data, &w_hat.data)?,
        lambda,
    );
    Ok(MetricsReport {
        video,
        watermark,
        losses,
    })
}
