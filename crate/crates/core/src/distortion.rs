//! Attacks on watermarked videos: random erasing, Gaussian blur, Gaussian
//! noise, rotation and a real H.264 round trip through an external ffmpeg.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{read_y4m, write_y4m_with, Chroma};
use crate::tensor::{FrameSequence, Plane, Volume};

pub const ERASE_RANGE: (f64, f64) = (0.05, 0.20);
pub const BLUR_KERNELS: [usize; 3] = [3, 5, 7];
pub const MAX_SIGMA: f64 = 0.2;
pub const MAX_ANGLE: f64 = 30.0;
pub const DEFAULT_CRF: u32 = 24;
pub const ERASE_FILL: f32 = 0.5;
pub const FFMPEG_ENV: &str = "PATCHMARK_FFMPEG";
pub const CODEC_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DistortionSpec {
    None,
    /// area ratio in `[0.05, 0.20]`
    Erase {
        ratio: f64,
    },
    Blur {
        kernel: usize,
    },
    /// `None` samples σ from `U(0, 0.2)`
    Noise {
        sigma: Option<f64>,
    },
    /// degrees in `(-30, 30)`; `None` samples uniformly
    Rotate {
        angle: Option<f64>,
    },
    H264 {
        crf: u32,
    },
}

impl DistortionSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            DistortionSpec::None => "none",
            DistortionSpec::Erase { .. } => "erase",
            DistortionSpec::Blur { .. } => "blur",
            DistortionSpec::Noise { .. } => "noise",
            DistortionSpec::Rotate { .. } => "rotate",
            DistortionSpec::H264 { .. } => "h264",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DistortionSpec::Erase { ratio }
                if !(ERASE_RANGE.0..=ERASE_RANGE.1).contains(&ratio) =>
            {
                Err(Error::param(format!(
                    "erase ratio {ratio} outside [{}, {}]",
                    ERASE_RANGE.0, ERASE_RANGE.1
                )))
            }
            DistortionSpec::Blur { kernel } if !BLUR_KERNELS.contains(&kernel) => Err(
                Error::param(format!("blur kernel {kernel} not one of {BLUR_KERNELS:?}")),
            ),
            DistortionSpec::Noise { sigma: Some(s) } if !(0.0..=MAX_SIGMA).contains(&s) => Err(
                Error::param(format!("noise sigma {s} outside [0, {MAX_SIGMA}]")),
            ),
            DistortionSpec::Rotate { angle: Some(a) } if a.is_nan() || a.abs() >= MAX_ANGLE => {
                Err(Error::param(format!(
                    "rotation angle {a} outside (-{MAX_ANGLE}, {MAX_ANGLE})"
                )))
            }
            DistortionSpec::H264 { crf } if crf > 51 => {
                Err(Error::param(format!("crf {crf} outside [0, 51]")))
            }
            _ => Ok(()),
        }
    }
}

/// What was actually applied, enough to reproduce or invert the attack.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttackRecord {
    pub kind: String,
    pub seed: u64,
    /// `(y, x, h, w)`
    pub rect: Option<(usize, usize, usize, usize)>,
    pub ratio: Option<f64>,
    pub kernel: Option<usize>,
    pub blur_sigma: Option<f64>,
    pub sigma: Option<f64>,
    pub angle: Option<f64>,
    pub crf: Option<u32>,
}

impl AttackRecord {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "kind={}", self.kind);
        let _ = writeln!(s, "seed={}", self.seed);
        if let Some((y, x, h, w)) = self.rect {
            let _ = writeln!(s, "rect={y},{x},{h},{w}");
        }
        if let Some(v) = self.ratio {
            let _ = writeln!(s, "ratio={v}");
        }
        if let Some(v) = self.kernel {
            let _ = writeln!(s, "kernel={v}");
        }
        if let Some(v) = self.blur_sigma {
            let _ = writeln!(s, "blur_sigma={v}");
        }
        if let Some(v) = self.sigma {
            let _ = writeln!(s, "sigma={v}");
        }
        if let Some(v) = self.angle {
            let _ = writeln!(s, "angle={v}");
        }
        if let Some(v) = self.crf {
            let _ = writeln!(s, "crf={v}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse("attack record", line.to_string()))?;
            kv.insert(k.to_string(), v.to_string());
        }
        fn num<T: std::str::FromStr>(kv: &BTreeMap<String, String>, k: &str) -> Result<Option<T>> {
            kv.get(k)
                .map(|v| {
                    v.parse()
                        .map_err(|_| Error::parse("attack record", format!("{k}={v}")))
                })
                .transpose()
        }
        let rect = match kv.get("rect") {
            None => None,
            Some(v) => {
                let p: Vec<usize> = v
                    .split(',')
                    .map(|t| t.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::parse("attack record", format!("rect={v}")))?;
                match p[..] {
                    [y, x, h, w] => Some((y, x, h, w)),
                    _ => return Err(Error::parse("attack record", format!("rect={v}"))),
                }
            }
        };
        Ok(AttackRecord {
            kind: kv
                .get("kind")
                .cloned()
                .ok_or_else(|| Error::parse("attack record", "missing kind"))?,
            seed: num(&kv, "seed")?.unwrap_or(0),
            rect,
            ratio: num(&kv, "ratio")?,
            kernel: num(&kv, "kernel")?,
            blur_sigma: num(&kv, "blur_sigma")?,
            sigma: num(&kv, "sigma")?,
            angle: num(&kv, "angle")?,
            crf: num(&kv, "crf")?,
        })
    }
}

/// Applies one attack. Output dimensions always match the input.
pub fn apply(
    v: &FrameSequence,
    spec: &DistortionSpec,
    seed: u64,
) -> Result<(FrameSequence, AttackRecord)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rec = AttackRecord {
        kind: spec.kind().to_string(),
        seed,
        ..AttackRecord::default()
    };
    let out = match *spec {
        DistortionSpec::None => v.clone(),
        DistortionSpec::Erase { ratio } => {
            let r = erase_rect(v.height, v.width, ratio, &mut rng);
            rec.rect = Some(r);
            rec.ratio = Some(ratio);
            erase(v, r)?
        }
        DistortionSpec::Blur { kernel } => {
            rec.kernel = Some(kernel);
            rec.blur_sigma = Some(blur_sigma(kernel));
            map_frames(v, |f| Ok(blur_plane(f, kernel)))?
        }
        DistortionSpec::Noise { sigma } => {
            let s = sigma.unwrap_or_else(|| rng.random_range(0.0..MAX_SIGMA));
            rec.sigma = Some(s);
            add_noise(v, s, seed)?
        }
        DistortionSpec::Rotate { angle } => {
            let a = angle.unwrap_or_else(|| rng.random_range(-MAX_ANGLE..MAX_ANGLE));
            rec.angle = Some(a);
            rotate(v, a)?
        }
        DistortionSpec::H264 { crf } => {
            rec.crf = Some(crf);
            h264_roundtrip(v, crf)?
        }
    };
    Ok((out, rec))
}

/// Undoes what can be undone before extraction: rotation is rotated back.
pub fn invert(v: &FrameSequence, rec: &AttackRecord) -> Result<FrameSequence> {
    match (rec.kind.as_str(), rec.angle) {
        ("rotate", Some(a)) => rotate(v, -a),
        _ => Ok(v.clone()),
    }
}

fn map_frames(
    v: &FrameSequence,
    f: impl Fn(&Plane) -> Result<Plane> + Sync,
) -> Result<FrameSequence> {
    let frames = (0..v.frames)
        .into_par_iter()
        .map(|t| f(&v.frame(t)))
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::from_frames(&frames)
}

/// A rectangle with the frame's aspect ratio covering about `ratio` of it.
pub fn erase_rect(
    height: usize,
    width: usize,
    ratio: f64,
    rng: &mut impl Rng,
) -> (usize, usize, usize, usize) {
    let area = ratio * (height * width) as f64;
    let h = ((height as f64 * ratio.sqrt()).round() as usize).clamp(1, height);
    let w = ((area / h as f64).round() as usize).clamp(1, width);
    let y = rng.random_range(0..=height - h);
    let x = rng.random_range(0..=width - w);
    (y, x, h, w)
}

pub fn erase(v: &FrameSequence, rect: (usize, usize, usize, usize)) -> Result<FrameSequence> {
    let (y0, x0, h, w) = rect;
    if y0 + h > v.height || x0 + w > v.width {
        return Err(Error::param("erase rectangle outside the frame"));
    }
    let mut vol: Volume = (**v).clone();
    for t in 0..v.frames {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                for c in 0..v.channels {
                    vol.set(t, y, x, c, ERASE_FILL);
                }
            }
        }
    }
    FrameSequence::new(vol)
}

/// `σ = 0.3·((k−1)/2 − 1) + 0.8`
pub fn blur_sigma(kernel: usize) -> f64 {
    0.3 * ((kernel as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

pub fn gaussian_kernel(kernel: usize) -> Vec<f32> {
    let s = blur_sigma(kernel);
    let c = (kernel / 2) as f64;
    let k: Vec<f64> = (0..kernel)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * s * s)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| (v / sum) as f32).collect()
}

/// Mirror without repeating the edge sample: `-1 → 1`, `n → n−2`.
fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

pub fn blur_plane(p: &Plane, kernel: usize) -> Plane {
    let k = gaussian_kernel(kernel);
    let r = (kernel / 2) as isize;
    let (h, w, ch) = (p.height, p.width, p.channels);
    let mut tmp = Plane::zeros(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let s: f32 = (0..kernel)
                    .map(|i| k[i] * p.get(y, reflect101(x as isize + i as isize - r, w), c))
                    .sum();
                tmp.set(y, x, c, s);
            }
        }
    }
    let mut out = Plane::zeros(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let s: f32 = (0..kernel)
                    .map(|i| k[i] * tmp.get(reflect101(y as isize + i as isize - r, h), x, c))
                    .sum();
                out.set(y, x, c, s.clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// i.i.d. Gaussian noise, clipped to `[0, 1]`. Each frame draws from its own
/// stream of the seed so frames can be processed in parallel.
pub fn add_noise(v: &FrameSequence, sigma: f64, seed: u64) -> Result<FrameSequence> {
    if sigma == 0.0 {
        return Ok(v.clone());
    }
    let normal = Normal::new(0.0f64, sigma).map_err(|e| Error::param(e.to_string()))?;
    let len = v.frame_len();
    let mut vol: Volume = (**v).clone();
    vol.data
        .par_chunks_mut(len)
        .enumerate()
        .for_each(|(t, frame)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64 + 1);
            for s in frame.iter_mut() {
                *s = (*s as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
            }
        });
    FrameSequence::new(vol)
}

/// Rotation about the frame center by `angle` degrees (counter-clockwise as
/// displayed), bilinear sampling, zero outside the source.
pub fn rotate_plane(p: &Plane, angle: f64) -> Plane {
    let (h, w, ch) = (p.height, p.width, p.channels);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.to_radians().sin_cos();
    let at = |y: isize, x: isize, c: usize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            p.get(y as usize, x as usize, c) as f64
        }
    };
    let mut out = Plane::zeros(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            // inverse map: rotate the output position back by -angle
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            if sx <= -1.0 || sy <= -1.0 || sx >= w as f64 || sy >= h as f64 {
                continue;
            }
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for c in 0..ch {
                let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0, c) + fx * at(y0, x0 + 1, c))
                    + fy * ((1.0 - fx) * at(y0 + 1, x0, c) + fx * at(y0 + 1, x0 + 1, c));
                out.set(y, x, c, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}

pub fn rotate(v: &FrameSequence, angle: f64) -> Result<FrameSequence> {
    if angle == 0.0 {
        return Ok(v.clone());
    }
    map_frames(v, |f| Ok(rotate_plane(f, angle)))
}

pub fn ffmpeg_program() -> String {
    std::env::var(FFMPEG_ENV).unwrap_or_else(|_| "ffmpeg".to_string())
}

/// Runs `program args`, feeding `input` on stdin, and returns stdout.
fn run_with_timeout(program: &str, args: &[&str], input: Vec<u8>) -> Result<Vec<u8>> {
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied => {
                Error::CodecUnavailable(format!("cannot run {program:?}: {e}"))
            }
            _ => Error::Io(e),
        })?;
    let mut stdin = child.stdin.take().expect("piped stdin");
    let writer = std::thread::spawn(move || {
        let _ = stdin.write_all(&input);
    });
    let mut stdout = child.stdout.take().expect("piped stdout");
    let reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stdout.read_to_end(&mut buf);
        buf
    });
    let mut stderr = child.stderr.take().expect("piped stderr");
    let err_reader = std::thread::spawn(move || {
        let mut buf = String::new();
        let _ = stderr.read_to_string(&mut buf);
        buf
    });

    let start = Instant::now();
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if start.elapsed() > CODEC_TIMEOUT {
            let _ = child.kill();
            let _ = child.wait();
            return Err(Error::Codec(format!(
                "{program} timed out after {}s",
                CODEC_TIMEOUT.as_secs()
            )));
        }
        std::thread::sleep(Duration::from_millis(20));
    };
    let _ = writer.join();
    let out = reader.join().unwrap_or_default();
    let err = err_reader.join().unwrap_or_default();
    if !status.success() {
        let msg = err.lines().last().unwrap_or("").to_string();
        if err.contains("Unknown encoder") || err.contains("Encoder not found") {
            return Err(Error::CodecUnavailable(format!("{program}: {msg}")));
        }
        return Err(Error::Codec(format!(
            "{program} exited with {status}: {msg}"
        )));
    }
    Ok(out)
}

/// Encodes with libx264 at `crf` (4:4:4, 8-bit) and decodes back. Gray
/// sequences travel as neutral-chroma color and come back averaged.
pub fn h264_roundtrip(v: &FrameSequence, crf: u32) -> Result<FrameSequence> {
    if crf > 51 {
        return Err(Error::param(format!("crf {crf} outside [0, 51]")));
    }
    let color = if v.channels == 1 {
        let planes: Vec<Plane> = v.planes().iter().map(|p| p.with_channels(3)).collect();
        FrameSequence::from_frames(&planes)?
    } else {
        v.clone()
    };
    let mut y4m = Vec::new();
    write_y4m_with(&color, Chroma::C444, &mut y4m)?;

    let program = ffmpeg_program();
    let dir = tempfile::tempdir()?;
    let stream = dir.path().join("stream.h264");
    let stream_arg = stream.to_string_lossy().to_string();
    let crf_arg = crf.to_string();
    let encode = [
        "-hide_banner",
        "-loglevel",
        "error",
        "-nostdin",
        "-y",
        "-f",
        "yuv4mpegpipe",
        "-i",
        "-",
        "-c:v",
        "libx264",
        "-preset",
        "medium",
        "-crf",
        &crf_arg,
        "-pix_fmt",
        "yuv444p",
        "-f",
        "h264",
        &stream_arg,
    ];
    run_with_timeout(&program, &encode, y4m)?;
    let decode = [
        "-hide_banner",
        "-loglevel",
        "error",
        "-i",
        &stream_arg,
        "-f",
        "yuv4mpegpipe",
        "-pix_fmt",
        "yuv444p",
        "-",
    ];
    let out = run_with_timeout(&program, &decode, Vec::new())?;
    let decoded = read_y4m(&out[..])?;
    if decoded.shape() != color.shape() {
        return Err(Error::Codec(format!(
            "codec returned {:?}, expected {:?}",
            decoded.shape(),
            color.shape()
        )));
    }
    if v.channels == 1 {
        let planes: Vec<Plane> = decoded
            .planes()
            .iter()
            .map(|p| p.with_channels(1))
            .collect();
        return FrameSequence::from_frames(&planes);
    }
    Ok(decoded)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(f: usize, h: usize, w: usize, c: usize, val: f32) -> FrameSequence {
        FrameSequence::new(Volume::filled(f, h, w, c, val)).unwrap()
    }

    #[test]
    fn none_and_zero_noise_are_identity() {
        let v = crate::synth::natural_video(2, 16, 16, 3, 1);
        assert_eq!(apply(&v, &DistortionSpec::None, 3).unwrap().0, v);
        let spec = DistortionSpec::Noise { sigma: Some(0.0) };
        assert_eq!(apply(&v, &spec, 3).unwrap().0, v);
    }

    #[test]
    fn erase_area() {
        let v = seq(2, 320, 512, 3, 0.0);
        let (out, rec) = apply(&v, &DistortionSpec::Erase { ratio: 0.2 }, 5).unwrap();
        let (_, _, h, w) = rec.rect.unwrap();
        let target = (0.2f64 * 320.0 * 512.0).floor() as usize;
        for t in 0..2 {
            let n = out.frame(t).data.iter().filter(|&&s| s == 0.5).count() / 3;
            assert_eq!(n, h * w);
            assert!(n.abs_diff(target) <= h.max(w));
        }
        assert!(apply(&v, &DistortionSpec::Erase { ratio: 0.3 }, 5).is_err());
    }

    #[test]
    fn blur_preserves_constant_and_sigma() {
        assert!((blur_sigma(3) - 0.8).abs() < 1e-12);
        assert!((blur_sigma(7) - 1.4).abs() < 1e-12);
        let v = seq(1, 8, 8, 1, 0.25);
        let (out, _) = apply(&v, &DistortionSpec::Blur { kernel: 5 }, 0).unwrap();
        assert!(out.data.iter().all(|&s| (s - 0.25).abs() < 1e-6));
        assert!(apply(&v, &DistortionSpec::Blur { kernel: 4 }, 0).is_err());
        assert_eq!(reflect101(-1, 5), 1);
        assert_eq!(reflect101(5, 5), 3);
        assert_eq!(reflect101(-3, 2), 1);
    }

    #[test]
    fn noise_deterministic_and_clipped() {
        let v = crate::synth::natural_video(2, 16, 16, 3, 1);
        let spec = DistortionSpec::Noise { sigma: Some(0.2) };
        let (a, _) = apply(&v, &spec, 9).unwrap();
        assert_eq!(a, apply(&v, &spec, 9).unwrap().0);
        assert_ne!(a, apply(&v, &spec, 10).unwrap().0);
        assert!(a.data.iter().all(|s| (0.0..=1.0).contains(s)));
        let (_, rec) = apply(&v, &DistortionSpec::Noise { sigma: None }, 9).unwrap();
        assert!((0.0..MAX_SIGMA).contains(&rec.sigma.unwrap()));
    }

    #[test]
    fn rotation_roundtrip_center() {
        let v = crate::synth::natural_video(1, 32, 32, 1, 4);
        let (r, rec) = apply(&v, &DistortionSpec::Rotate { angle: Some(10.0) }, 0).unwrap();
        assert_eq!(rec.angle, Some(10.0));
        let back = invert(&r, &rec).unwrap();
        let err = (back.get(0, 16, 16, 0) - v.get(0, 16, 16, 0)).abs();
        assert!(err < 0.02);
        assert!(apply(&v, &DistortionSpec::Rotate { angle: Some(30.0) }, 0).is_err());
        // a quarter turn of a 3x3 moves the top-middle sample to the left-middle
        let mut p = Plane::zeros(3, 3, 1);
        p.set(0, 1, 0, 1.0);
        let q = rotate_plane(&p, 90.0);
        assert!((q.get(1, 0, 0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn record_roundtrip() {
        let rec = AttackRecord {
            kind: "erase".into(),
            seed: 4,
            rect: Some((1, 2, 3, 4)),
            ratio: Some(0.1),
            ..AttackRecord::default()
        };
        assert_eq!(AttackRecord::parse(&rec.to_text()).unwrap(), rec);
        assert!(AttackRecord::parse("seed=1").is_err());
    }

    #[test]
    fn missing_codec_is_reported() {
        // a program name that cannot exist on the path
        let r = run_with_timeout("patchmark-no-such-encoder", &[], Vec::new());
        assert!(matches!(r, Err(Error::CodecUnavailable(_))));
    }
}
