//! Loading and storing frame sequences and watermark images.
//!
//! Frames live either in a directory of PNG files ordered by the number in
//! their file name (`frame_000001.png`, `frame_000002.png`, ...) or in a y4m
//! stream. Samples are scaled `v / 255` on load and rounded back on save.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{FrameSequence, Plane, Volume, WatermarkImage};

/// Locator meaning "standard input/output" for y4m streams.
pub const STDIO: &str = "-";

#[inline]
fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[inline]
fn from_u8(v: u8) -> f32 {
    v as f32 / 255.0
}

fn plane_from_dynamic(img: DynamicImage, what: &str) -> Result<Plane> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(buf) => {
            Plane::from_vec(h, w, 1, buf.into_raw().into_iter().map(from_u8).collect())
        }
        DynamicImage::ImageLumaA8(buf) => {
            Plane::from_vec(h, w, 1, buf.pixels().map(|p| from_u8(p.0[0])).collect())
        }
        DynamicImage::ImageRgb8(buf) => {
            Plane::from_vec(h, w, 3, buf.into_raw().into_iter().map(from_u8).collect())
        }
        DynamicImage::ImageRgba8(buf) => Plane::from_vec(
            h,
            w,
            3,
            buf.pixels()
                .flat_map(|p| [p.0[0], p.0[1], p.0[2]])
                .map(from_u8)
                .collect(),
        ),
        other => Err(Error::PixelFormat(format!(
            "{what}: {:?} (only 8-bit gray/RGB are supported)",
            other.color()
        ))),
    }
}

pub fn read_png(path: &Path) -> Result<Plane> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let img = image::ImageReader::open(path)?
        .with_guessed_format()?
        .decode()?;
    plane_from_dynamic(img, &path.display().to_string())
}

/// Encodes a plane as an 8-bit gray or RGB PNG.
pub fn encode_png(plane: &Plane) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = plane.data.iter().map(|&v| to_u8(v)).collect();
    let (w, h) = (plane.width as u32, plane.height as u32);
    let img = match plane.channels {
        1 => DynamicImage::ImageLuma8(
            GrayImage::from_raw(w, h, bytes).ok_or_else(|| Error::dims("png buffer size"))?,
        ),
        3 => DynamicImage::ImageRgb8(
            RgbImage::from_raw(w, h, bytes).ok_or_else(|| Error::dims("png buffer size"))?,
        ),
        c => return Err(Error::PixelFormat(format!("{c}-channel plane"))),
    };
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = sibling_temp(path);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::Io(e)
    })
}

fn sibling_temp(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    path.with_file_name(format!(".{name}.partial-{}", std::process::id()))
}

pub fn write_png(plane: &Plane, path: &Path) -> Result<()> {
    write_atomic(path, &encode_png(plane)?)
}

/// Numeric sort key of a frame file: the last run of digits in its stem.
fn frame_number(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_string_lossy();
    let digits: String = stem
        .chars()
        .rev()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok()
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .map(|e| e.eq_ignore_ascii_case("png"))
        .unwrap_or(false)
}

fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_png(p))
        .collect();
    files.sort_by(|a, b| {
        let ka = frame_number(a).unwrap_or(u64::MAX);
        let kb = frame_number(b).unwrap_or(u64::MAX);
        ka.cmp(&kb).then_with(|| a.cmp(b))
    });
    Ok(files)
}

/// Loads a frame sequence from a PNG directory, a `.y4m` file, or `-` (y4m on
/// standard input).
pub fn load_frames(path: impl AsRef<Path>) -> Result<FrameSequence> {
    let path = path.as_ref();
    if path.as_os_str() == STDIO {
        return read_y4m(std::io::stdin().lock());
    }
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    if path.is_file() {
        return read_y4m(fs::File::open(path)?);
    }
    let files = list_frames(path)?;
    if files.is_empty() {
        return Err(Error::dims(format!("no PNG frames in {}", path.display())));
    }
    let planes = files
        .par_iter()
        .map(|f| read_png(f))
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::from_frames(&planes)
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{:06}.png", index + 1)
}

/// Stores a frame sequence. A path ending in `.y4m` (or `-`) produces a y4m
/// stream; anything else is treated as a PNG frame directory.
///
/// Directory output is staged in a temporary sibling directory first, so a
/// failure never leaves a partially written sequence behind.
pub fn save_frames(seq: &FrameSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if path.as_os_str() == STDIO {
        let mut out = std::io::stdout().lock();
        write_y4m(seq, &mut out)?;
        out.flush()?;
        return Ok(());
    }
    let is_y4m = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("y4m"))
        .unwrap_or(false);
    if is_y4m {
        let mut buf = Vec::new();
        write_y4m(seq, &mut buf)?;
        return write_atomic(path, &buf);
    }

    let encoded = (0..seq.frames)
        .into_par_iter()
        .map(|t| encode_png(&seq.frame(t)))
        .collect::<Result<Vec<_>>>()?;

    let stage = sibling_temp(path);
    if stage.exists() {
        fs::remove_dir_all(&stage)?;
    }
    fs::create_dir_all(&stage)?;
    let staged = (|| -> Result<()> {
        for (t, bytes) in encoded.iter().enumerate() {
            fs::write(stage.join(frame_file_name(t)), bytes)?;
        }
        if !path.exists() {
            fs::rename(&stage, path)?;
            return Ok(());
        }
        // Existing directory: replace its frame files only.
        for old in list_frames(path)? {
            if old
                .file_name()
                .map(|n| n.to_string_lossy().starts_with("frame_"))
                .unwrap_or(false)
            {
                fs::remove_file(old)?;
            }
        }
        for t in 0..encoded.len() {
            let name = frame_file_name(t);
            fs::rename(stage.join(&name), path.join(&name))?;
        }
        fs::remove_dir(&stage)?;
        Ok(())
    })();
    if staged.is_err() && stage.exists() {
        let _ = fs::remove_dir_all(&stage);
    }
    staged
}

/// Loads a watermark image whose dimensions must be multiples of `patch_size`.
/// Grayscale images stay single-channel.
pub fn load_watermark(path: impl AsRef<Path>, patch_size: usize) -> Result<WatermarkImage> {
    WatermarkImage::new(read_png(path.as_ref())?, patch_size)
}

pub fn save_watermark(w: &WatermarkImage, path: impl AsRef<Path>) -> Result<()> {
    write_png(w, path.as_ref())
}

// ---------------------------------------------------------------------------
// y4m

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Chroma {
    C420,
    C444,
    Mono,
}

impl Chroma {
    fn parse(tag: &str) -> Result<Self> {
        match tag {
            "420" | "420jpeg" | "420paldv" | "420mpeg2" => Ok(Chroma::C420),
            "444" => Ok(Chroma::C444),
            "mono" => Ok(Chroma::Mono),
            other => Err(Error::PixelFormat(format!("y4m colorspace C{other}"))),
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Chroma::C420 => "420jpeg",
            Chroma::C444 => "444",
            Chroma::Mono => "mono",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Y4mHeader {
    pub width: usize,
    pub height: usize,
    pub chroma: Chroma,
    pub rate: (u32, u32),
}

impl Y4mHeader {
    fn parse(line: &str) -> Result<Self> {
        let mut tokens = line.split_ascii_whitespace();
        if tokens.next() != Some("YUV4MPEG2") {
            return Err(Error::parse("y4m header", "missing YUV4MPEG2 signature"));
        }
        let (mut width, mut height, mut chroma, mut rate) = (0, 0, Chroma::C420, (25, 1));
        for tok in tokens {
            let (key, val) = tok.split_at(1);
            match key {
                "W" => width = val.parse().map_err(|_| Error::parse("y4m header", tok))?,
                "H" => height = val.parse().map_err(|_| Error::parse("y4m header", tok))?,
                "C" => chroma = Chroma::parse(val)?,
                "F" => {
                    let (n, d) = val
                        .split_once(':')
                        .ok_or_else(|| Error::parse("y4m header", tok))?;
                    rate = (
                        n.parse().map_err(|_| Error::parse("y4m header", tok))?,
                        d.parse().map_err(|_| Error::parse("y4m header", tok))?,
                    );
                }
                _ => {}
            }
        }
        if width == 0 || height == 0 {
            return Err(Error::parse("y4m header", "missing W/H"));
        }
        Ok(Y4mHeader {
            width,
            height,
            chroma,
            rate,
        })
    }

    fn frame_bytes(&self) -> usize {
        let luma = self.width * self.height;
        match self.chroma {
            Chroma::Mono => luma,
            Chroma::C444 => 3 * luma,
            Chroma::C420 => luma + 2 * self.width.div_ceil(2) * self.height.div_ceil(2),
        }
    }
}

fn ycbcr_to_rgb(y: f32, cb: f32, cr: f32) -> [f32; 3] {
    let (cb, cr) = (cb - 128.0, cr - 128.0);
    [
        y + 1.402 * cr,
        y - 0.344_136 * cb - 0.714_136 * cr,
        y + 1.772 * cb,
    ]
}

fn rgb_to_ycbcr(r: f32, g: f32, b: f32) -> [f32; 3] {
    [
        0.299 * r + 0.587 * g + 0.114 * b,
        128.0 - 0.168_736 * r - 0.331_264 * g + 0.5 * b,
        128.0 + 0.5 * r - 0.418_688 * g - 0.081_312 * b,
    ]
}

#[inline]
fn byte(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Reads an 8-bit y4m stream (4:2:0, 4:4:4 or mono). Colour streams come back
/// as RGB using full-range BT.601; 4:2:0 chroma is upsampled by replication.
pub fn read_y4m(reader: impl Read) -> Result<FrameSequence> {
    let mut reader = BufReader::new(reader);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header = Y4mHeader::parse(line.trim_end())?;
    let (w, h) = (header.width, header.height);
    let mut planes = Vec::new();
    let mut buf = vec![0u8; header.frame_bytes()];
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        if !line.starts_with("FRAME") {
            return Err(Error::parse("y4m frame", "missing FRAME marker"));
        }
        reader
            .read_exact(&mut buf)
            .map_err(|e| Error::parse("y4m frame", e.to_string()))?;
        let plane = match header.chroma {
            Chroma::Mono => Plane::from_vec(h, w, 1, buf.iter().map(|&b| from_u8(b)).collect())?,
            Chroma::C444 | Chroma::C420 => {
                let luma = &buf[..w * h];
                let (cw, chroma_len) = match header.chroma {
                    Chroma::C444 => (w, w * h),
                    _ => (w.div_ceil(2), w.div_ceil(2) * h.div_ceil(2)),
                };
                let cb = &buf[w * h..w * h + chroma_len];
                let cr = &buf[w * h + chroma_len..w * h + 2 * chroma_len];
                let mut p = Plane::zeros(h, w, 3);
                for y in 0..h {
                    for x in 0..w {
                        let ci = match header.chroma {
                            Chroma::C444 => y * cw + x,
                            _ => (y / 2) * cw + x / 2,
                        };
                        let rgb =
                            ycbcr_to_rgb(luma[y * w + x] as f32, cb[ci] as f32, cr[ci] as f32);
                        for (c, v) in rgb.into_iter().enumerate() {
                            p.set(y, x, c, byte(v) as f32 / 255.0);
                        }
                    }
                }
                p
            }
        };
        planes.push(plane);
    }
    if planes.is_empty() {
        return Err(Error::parse("y4m stream", "no frames"));
    }
    FrameSequence::from_frames(&planes)
}

/// Writes a y4m stream: RGB sequences as 4:2:0 (2×2 chroma averaging),
/// single-channel sequences as mono.
pub fn write_y4m(seq: &FrameSequence, out: &mut impl Write) -> Result<()> {
    let chroma = if seq.channels == 1 {
        Chroma::Mono
    } else {
        Chroma::C420
    };
    write_y4m_with(seq, chroma, out)
}

pub fn write_y4m_with(seq: &FrameSequence, chroma: Chroma, out: &mut impl Write) -> Result<()> {
    let (w, h) = (seq.width, seq.height);
    if seq.channels == 1 && chroma != Chroma::Mono {
        return Err(Error::PixelFormat(
            "gray sequence must be written as mono".into(),
        ));
    }
    if seq.channels == 3 && chroma == Chroma::Mono {
        return Err(Error::PixelFormat(
            "RGB sequence cannot be written as mono".into(),
        ));
    }
    writeln!(out, "YUV4MPEG2 W{w} H{h} F25:1 Ip A1:1 C{}", chroma.tag())?;
    for t in 0..seq.frames {
        out.write_all(b"FRAME\n")?;
        let frame = seq.frame_slice(t);
        if chroma == Chroma::Mono {
            let bytes: Vec<u8> = frame.iter().map(|&v| to_u8(v)).collect();
            out.write_all(&bytes)?;
            continue;
        }
        let mut ybuf = Vec::with_capacity(w * h);
        let mut cb = vec![0f32; w * h];
        let mut cr = vec![0f32; w * h];
        for i in 0..w * h {
            let px = &frame[i * 3..i * 3 + 3];
            let [yy, u, v] = rgb_to_ycbcr(
                to_u8(px[0]) as f32,
                to_u8(px[1]) as f32,
                to_u8(px[2]) as f32,
            );
            ybuf.push(byte(yy));
            cb[i] = u;
            cr[i] = v;
        }
        out.write_all(&ybuf)?;
        match chroma {
            Chroma::C444 => {
                out.write_all(&cb.iter().map(|&v| byte(v)).collect::<Vec<_>>())?;
                out.write_all(&cr.iter().map(|&v| byte(v)).collect::<Vec<_>>())?;
            }
            _ => {
                for plane in [&cb, &cr] {
                    let mut sub = Vec::with_capacity(w.div_ceil(2) * h.div_ceil(2));
                    for y in (0..h).step_by(2) {
                        for x in (0..w).step_by(2) {
                            let mut acc = 0.0;
                            let mut n = 0.0;
                            for (yy, xx) in [(y, x), (y, x + 1), (y + 1, x), (y + 1, x + 1)] {
                                if yy < h && xx < w {
                                    acc += plane[yy * w + xx];
                                    n += 1.0;
                                }
                            }
                            sub.push(byte(acc / n));
                        }
                    }
                    out.write_all(&sub)?;
                }
            }
        }
    }
    Ok(())
}

/// Builds a sequence from raw 8-bit samples, frame-major. Mostly useful in
/// tests and for piping.
pub fn sequence_from_bytes(
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    bytes: &[u8],
) -> Result<FrameSequence> {
    FrameSequence::new(Volume::from_vec(
        frames,
        height,
        width,
        channels,
        bytes.iter().map(|&b| from_u8(b)).collect(),
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_seq(f: usize, h: usize, w: usize, c: usize, seed: u64) -> FrameSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..f * h * w * c).map(|_| rng.random::<f32>()).collect();
        FrameSequence::new(Volume::from_vec(f, h, w, c, data).unwrap()).unwrap()
    }

    fn max_diff(a: &[f32], b: &[f32]) -> f32 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max)
    }

    #[test]
    fn png_roundtrip_within_one_step() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("frames");
        let seq = random_seq(2, 4, 4, 3, 1);
        save_frames(&seq, &out).unwrap();
        let back = load_frames(&out).unwrap();
        assert_eq!(back.shape(), [2, 4, 4, 3]);
        assert!(max_diff(&seq.data, &back.data) <= 1.0 / 255.0 + 1e-6);
    }

    #[test]
    fn zeros_load_back_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let seq = FrameSequence::new(Volume::zeros(3, 2, 2, 1)).unwrap();
        save_frames(&seq, dir.path().join("z")).unwrap();
        let back = load_frames(dir.path().join("z")).unwrap();
        assert!(back.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn white_gray_png_scales_to_one() {
        let dir = tempfile::tempdir().unwrap();
        GrayImage::from_raw(2, 2, vec![255; 4])
            .unwrap()
            .save(dir.path().join("frame_000001.png"))
            .unwrap();
        let seq = load_frames(dir.path()).unwrap();
        assert_eq!(seq.shape(), [1, 2, 2, 1]);
        assert!(seq.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mixed_sizes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        GrayImage::new(2, 2)
            .save(dir.path().join("frame_000001.png"))
            .unwrap();
        GrayImage::new(4, 2)
            .save(dir.path().join("frame_000002.png"))
            .unwrap();
        let err = load_frames(dir.path()).unwrap_err();
        assert!(
            err.to_string().contains("inconsistent frame dimensions"),
            "{err}"
        );
    }

    #[test]
    fn numeric_order_not_lexicographic() {
        let dir = tempfile::tempdir().unwrap();
        for (name, v) in [("f10.png", 30u8), ("f2.png", 20), ("f1.png", 10)] {
            GrayImage::from_raw(2, 2, vec![v; 4])
                .unwrap()
                .save(dir.path().join(name))
                .unwrap();
        }
        let seq = load_frames(dir.path()).unwrap();
        let firsts: Vec<u8> = (0..3).map(|t| to_u8(seq.get(t, 0, 0, 0))).collect();
        assert_eq!(firsts, vec![10, 20, 30]);
    }

    #[test]
    fn missing_path_is_an_error() {
        assert!(matches!(
            load_frames("/definitely/not/here"),
            Err(Error::MissingPath(_))
        ));
    }

    #[test]
    fn sixteen_bit_png_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("deep.png");
        image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(2, 2)
            .save(&p)
            .unwrap();
        assert!(matches!(read_png(&p), Err(Error::PixelFormat(_))));
    }

    #[test]
    fn watermark_keeps_gray_channel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("wm.png");
        GrayImage::from_raw(16, 16, vec![128; 256])
            .unwrap()
            .save(&p)
            .unwrap();
        let w = load_watermark(&p, 16).unwrap();
        assert_eq!((w.height, w.width, w.channels), (16, 16, 1));
        GrayImage::new(250, 250).save(&p).unwrap();
        let err = load_watermark(&p, 16).unwrap_err();
        assert!(err
            .to_string()
            .contains("dimensions not divisible by patch size"));
    }

    #[test]
    fn y4m_mono_roundtrip_exact_after_quantization() {
        let seq = random_seq(3, 4, 6, 1, 7);
        let mut buf = Vec::new();
        write_y4m(&seq, &mut buf).unwrap();
        let back = read_y4m(&buf[..]).unwrap();
        assert_eq!(back.shape(), seq.shape());
        assert!(max_diff(&seq.data, &back.data) <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn y4m_gray_rgb_survives_420() {
        // Neutral colours carry no chroma, so subsampling is lossless for them.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut v = Volume::zeros(2, 4, 4, 3);
        for p in 0..2 * 16 {
            let g = rng.random_range(0..=255u8) as f32 / 255.0;
            v.data[p * 3..p * 3 + 3].fill(g);
        }
        let seq = FrameSequence::new(v).unwrap();
        let mut buf = Vec::new();
        write_y4m(&seq, &mut buf).unwrap();
        assert!(buf.starts_with(b"YUV4MPEG2 W4 H4"));
        let back = read_y4m(&buf[..]).unwrap();
        assert!(max_diff(&seq.data, &back.data) <= 1.0 / 255.0 + 1e-6);
    }

    #[test]
    fn y4m_444_colour_roundtrip_close() {
        let seq = random_seq(1, 4, 4, 3, 11);
        let mut buf = Vec::new();
        write_y4m_with(&seq, Chroma::C444, &mut buf).unwrap();
        let back = read_y4m(&buf[..]).unwrap();
        assert!(max_diff(&seq.data, &back.data) <= 3.0 / 255.0);
    }

    #[test]
    fn y4m_rejects_high_bit_depth() {
        let data = b"YUV4MPEG2 W2 H2 F25:1 C420p10\nFRAME\n";
        assert!(matches!(read_y4m(&data[..]), Err(Error::PixelFormat(_))));
    }

    #[test]
    fn loading_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let seq = random_seq(2, 6, 8, 3, 5);
        save_frames(&seq, dir.path().join("a")).unwrap();
        let a = load_frames(dir.path().join("a")).unwrap();
        let b = load_frames(dir.path().join("a")).unwrap();
        assert_eq!(a, b);
    }
}
