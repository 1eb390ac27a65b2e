//! Seeded synthetic test material: natural-looking videos and flat-color
//! logos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{FrameSequence, Plane, Volume};

struct Blob {
    y: f32,
    x: f32,
    vy: f32,
    vx: f32,
    radius: f32,
    amp: Vec<f32>,
}

/// Smooth gradients and drifting soft blobs with mild texture, samples in
/// `[0.05, 0.95]`.
pub fn natural_video(
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    seed: u64,
) -> FrameSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (height as f32, width as f32);
    let base: Vec<[f32; 3]> = (0..channels)
        .map(|_| {
            [
                rng.random_range(0.3..0.6),
                rng.random_range(-0.25..0.25),
                rng.random_range(-0.25..0.25),
            ]
        })
        .collect();
    let blobs: Vec<Blob> = (0..rng.random_range(3..7))
        .map(|_| Blob {
            y: rng.random_range(0.0..hf),
            x: rng.random_range(0.0..wf),
            vy: rng.random_range(-3.0..3.0),
            vx: rng.random_range(-3.0..3.0),
            radius: rng.random_range(0.08..0.25) * hf.min(wf),
            amp: (0..channels).map(|_| rng.random_range(-0.3..0.3)).collect(),
        })
        .collect();
    let texture: Vec<(f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.05..0.4),
                rng.random_range(0.05..0.4),
                rng.random_range(0.0..std::f32::consts::TAU),
            )
        })
        .collect();
    let grain = Normal::new(0.0f32, 0.01).expect("valid sigma");

    let mut v = Volume::zeros(frames, height, width, channels);
    for t in 0..frames {
        let tf = t as f32;
        for y in 0..height {
            for x in 0..width {
                let (yn, xn) = (y as f32 / hf - 0.5, x as f32 / wf - 0.5);
                let tex: f32 = texture
                    .iter()
                    .map(|&(fy, fx, ph)| (fy * y as f32 + fx * x as f32 + ph + 0.2 * tf).sin())
                    .sum::<f32>()
                    * 0.01;
                for c in 0..channels {
                    let [b0, gy, gx] = base[c];
                    let mut val = b0 + gy * yn + gx * xn + tex;
                    for b in &blobs {
                        let dy = y as f32 - (b.y + b.vy * tf);
                        let dx = x as f32 - (b.x + b.vx * tf);
                        val +=
                            b.amp[c] * (-(dy * dy + dx * dx) / (2.0 * b.radius * b.radius)).exp();
                    }
                    val += grain.sample(&mut rng);
                    v.set(t, y, x, c, val.clamp(0.05, 0.95));
                }
            }
        }
    }
    FrameSequence::new(v).expect("synthetic video is valid")
}

/// Piecewise-constant rectangles and discs on a flat background.
pub fn logo(size: usize, channels: usize, seed: u64) -> Plane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| -> Vec<f32> {
        (0..channels)
            .map(|_| rng.random_range(0.0f32..=1.0))
            .collect()
    };
    let bg = color(&mut rng);
    let mut p = Plane::zeros(size, size, channels);
    for y in 0..size {
        for x in 0..size {
            for c in 0..channels {
                p.set(y, x, c, bg[c]);
            }
        }
    }
    let s = size as f32;
    for _ in 0..rng.random_range(3..8) {
        let col = color(&mut rng);
        let cy = rng.random_range(0.0..s);
        let cx = rng.random_range(0.0..s);
        let ry = rng.random_range(0.05..0.3) * s;
        let rx = rng.random_range(0.05..0.3) * s;
        let disc = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = ((y as f32 - cy) / ry, (x as f32 - cx) / rx);
                let inside = if disc {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    for c in 0..channels {
                        p.set(y, x, c, col[c]);
                    }
                }
            }
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn video_range_and_determinism() {
        let a = natural_video(2, 16, 24, 3, 7);
        assert!(a.data.iter().all(|&v| (0.05..=0.95).contains(&v)));
        assert_eq!(a, natural_video(2, 16, 24, 3, 7));
        assert_ne!(a, natural_video(2, 16, 24, 3, 8));
    }

    #[test]
    fn logo_is_flat_colored() {
        let l = logo(32, 3, 1);
        assert_eq!((l.height, l.width, l.channels), (32, 32, 3));
        let mut colors: Vec<[u32; 3]> = l
            .data
            .chunks(3)
            .map(|p| [p[0].to_bits(), p[1].to_bits(), p[2].to_bits()])
            .collect();
        colors.sort();
        colors.dedup();
        assert!(colors.len() <= 8);
    }
}
