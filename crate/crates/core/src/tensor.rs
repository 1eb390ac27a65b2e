//! Dense real-valued tensors shared by every stage of the pipeline.
//!
//! Samples are stored channel-interleaved in row-major order. A [`Volume`]
//! stacks frames in front of that, so the flat index of `(t, y, x, c)` is
//! `((t * height + y) * width + x) * channels + c`.

use std::ops::Deref;

use crate::error::{Error, Result};

/// A single H×W×C image plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Plane {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Plane {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::dims(format!(
                "plane {height}x{width}x{channels} needs {} samples, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Plane {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn same_shape(&self, other: &Plane) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Copies the `h`×`w` window whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Plane> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::dims(format!(
                "crop {h}x{w}@({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut out = Vec::with_capacity(h * w * c);
        for y in y0..y0 + h {
            let start = self.index(y, x0, 0);
            out.extend_from_slice(&self.data[start..start + w * c]);
        }
        Ok(Plane {
            height: h,
            width: w,
            channels: c,
            data: out,
        })
    }

    /// Writes `src` into this plane with its top-left corner at `(y0, x0)`.
    pub fn paste(&mut self, src: &Plane, y0: usize, x0: usize) -> Result<()> {
        if src.channels != self.channels
            || y0 + src.height > self.height
            || x0 + src.width > self.width
        {
            return Err(Error::dims(format!(
                "paste {}x{}x{}@({y0},{x0}) into {}x{}x{}",
                src.height, src.width, src.channels, self.height, self.width, self.channels
            )));
        }
        let row = src.width * src.channels;
        for y in 0..src.height {
            let dst = self.index(y0 + y, x0, 0);
            let s = y * row;
            self.data[dst..dst + row].copy_from_slice(&src.data[s..s + row]);
        }
        Ok(())
    }

    /// Converts between 1 and C channels: replication upward, mean downward.
    pub fn with_channels(&self, channels: usize) -> Plane {
        if channels == self.channels {
            return self.clone();
        }
        let mut out = Plane::zeros(self.height, self.width, channels);
        for p in 0..self.pixels() {
            let src = &self.data[p * self.channels..(p + 1) * self.channels];
            if self.channels == 1 {
                out.data[p * channels..(p + 1) * channels].fill(src[0]);
            } else {
                let mean = src.iter().sum::<f32>() / self.channels as f32;
                out.data[p * channels..(p + 1) * channels].fill(mean);
            }
        }
        out
    }
}

/// An F×H×W×C stack of planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Volume {
            frames,
            height,
            width,
            channels,
            data: vec![0.0; frames * height * width * channels],
        }
    }

    pub fn filled(frames: usize, height: usize, width: usize, channels: usize, value: f32) -> Self {
        Volume {
            frames,
            height,
            width,
            channels,
            data: vec![value; frames * height * width * channels],
        }
    }

    pub fn from_vec(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let n = frames * height * width * channels;
        if data.len() != n {
            return Err(Error::dims(format!(
                "volume {frames}x{height}x{width}x{channels} needs {n} samples, got {}",
                data.len()
            )));
        }
        Ok(Volume {
            frames,
            height,
            width,
            channels,
            data,
        })
    }

    /// Stacks equally-shaped planes along a new frame axis.
    pub fn from_planes(planes: &[Plane]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::dims("cannot stack zero planes"))?;
        let mut data = Vec::with_capacity(planes.len() * first.data.len());
        for (t, p) in planes.iter().enumerate() {
            if !p.same_shape(first) {
                return Err(Error::InconsistentFrames(format!(
                    "frame {t} is {}x{}x{}, frame 0 is {}x{}x{}",
                    p.height, p.width, p.channels, first.height, first.width, first.channels
                )));
            }
            data.extend_from_slice(&p.data);
        }
        Ok(Volume {
            frames: planes.len(),
            height: first.height,
            width: first.width,
            channels: first.channels,
            data,
        })
    }

    #[inline]
    pub fn index(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.height + y) * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(t, y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, y: usize, x: usize, c: usize, v: f32) {
        let i = self.index(t, y, x, c);
        self.data[i] = v;
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Number of spatiotemporal positions (tokens), ignoring channels.
    pub fn positions(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn frame_slice(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_slice_mut(&mut self, t: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn frame(&self, t: usize) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.frame_slice(t).to_vec(),
        }
    }

    pub fn set_frame(&mut self, t: usize, plane: &Plane) -> Result<()> {
        if plane.height != self.height
            || plane.width != self.width
            || plane.channels != self.channels
        {
            return Err(Error::dims(format!(
                "frame {}x{}x{} does not fit volume {}x{}x{}",
                plane.height, plane.width, plane.channels, self.height, self.width, self.channels
            )));
        }
        self.frame_slice_mut(t).copy_from_slice(&plane.data);
        Ok(())
    }

    pub fn planes(&self) -> Vec<Plane> {
        (0..self.frames).map(|t| self.frame(t)).collect()
    }

    pub fn same_shape(&self, other: &Volume) -> bool {
        self.frames == other.frames
            && self.height == other.height
            && self.width == other.width
            && self.channels == other.channels
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }
}

fn check_unit_range(data: &[f32]) -> Result<()> {
    for (index, &value) in data.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::SampleRange { index, value });
        }
    }
    Ok(())
}

/// A video: a [`Volume`] whose samples all lie in `[0, 1]`, with at least one
/// frame and even spatial dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence(Volume);

impl FrameSequence {
    pub fn new(volume: Volume) -> Result<Self> {
        if volume.frames == 0 {
            return Err(Error::dims("a frame sequence needs at least one frame"));
        }
        if volume.height < 2
            || volume.width < 2
            || !volume.height.is_multiple_of(2)
            || !volume.width.is_multiple_of(2)
        {
            return Err(Error::dims(format!(
                "frame size {}x{} must be even and at least 2x2",
                volume.height, volume.width
            )));
        }
        if volume.channels != 1 && volume.channels != 3 {
            return Err(Error::dims(format!(
                "{} channels (expected 1 or 3)",
                volume.channels
            )));
        }
        check_unit_range(&volume.data)?;
        Ok(FrameSequence(volume))
    }

    /// Clamps every sample into `[0, 1]` (NaN becomes 0) before validating.
    pub fn clamped(mut volume: Volume) -> Result<Self> {
        for v in &mut volume.data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        FrameSequence::new(volume)
    }

    pub fn from_frames(frames: &[Plane]) -> Result<Self> {
        FrameSequence::new(Volume::from_planes(frames)?)
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }
}

impl Deref for FrameSequence {
    type Target = Volume;

    fn deref(&self) -> &Volume {
        &self.0
    }
}

/// A graphical watermark: an image plane with samples in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WatermarkImage(Plane);

impl WatermarkImage {
    /// Validates range, channel count and divisibility by `patch_size`.
    pub fn new(plane: Plane, patch_size: usize) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::param("patch size must be positive"));
        }
        if !plane.height.is_multiple_of(patch_size) || !plane.width.is_multiple_of(patch_size) {
            return Err(Error::NotDivisible {
                height: plane.height,
                width: plane.width,
                patch_size,
            });
        }
        if plane.channels != 1 && plane.channels != 3 {
            return Err(Error::dims(format!(
                "watermark has {} channels (expected 1 or 3)",
                plane.channels
            )));
        }
        check_unit_range(&plane.data)?;
        Ok(WatermarkImage(plane))
    }

    pub fn into_plane(self) -> Plane {
        self.0
    }
}

impl Deref for WatermarkImage {
    type Target = Plane;

    fn deref(&self) -> &Plane {
        &self.0
    }
}
