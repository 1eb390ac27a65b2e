//! Single-level orthonormal Haar transforms in two and three dimensions, and
//! the mosaic layout that tiles the subbands back into a full-size tensor.
//!
//! Filters: low `(a + b) / √2`, high `(a − b) / √2`, where `a` precedes `b`
//! along the axis. Band labels list the axes in `(height, width)` order for
//! 2D and `(frame, height, width)` order for 3D, so `LH` is low along height
//! and high along width. Channels are transformed independently.

use std::f32::consts::FRAC_1_SQRT_2;

use crate::error::{Error, Result};
use crate::tensor::{Plane, Volume};

/// The four half-resolution planes of a 2D transform.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandSet2D {
    pub ll: Plane,
    pub lh: Plane,
    pub hl: Plane,
    pub hh: Plane,
}

impl SubbandSet2D {
    pub fn bands(&self) -> [&Plane; 4] {
        [&self.ll, &self.lh, &self.hl, &self.hh]
    }

    fn check(&self) -> Result<()> {
        let ll = &self.ll;
        if self.bands().iter().any(|b| !b.same_shape(ll)) {
            return Err(Error::dims("2D subbands have mismatched dimensions"));
        }
        Ok(())
    }

    pub fn energy(&self) -> f64 {
        self.bands().iter().map(|b| sum_sq(&b.data)).sum()
    }
}

/// Identifies one of the eight 3D subbands. Bit 2 is the frame axis, bit 1
/// height, bit 0 width; a set bit means high-pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Band3(pub u8);

impl Band3 {
    pub const LLL: Band3 = Band3(0b000);
    pub const LLH: Band3 = Band3(0b001);
    pub const LHL: Band3 = Band3(0b010);
    pub const LHH: Band3 = Band3(0b011);
    pub const HLL: Band3 = Band3(0b100);
    pub const HLH: Band3 = Band3(0b101);
    pub const HHL: Band3 = Band3(0b110);
    pub const HHH: Band3 = Band3(0b111);

    pub fn frame_high(self) -> bool {
        self.0 & 0b100 != 0
    }

    pub fn height_high(self) -> bool {
        self.0 & 0b010 != 0
    }

    pub fn width_high(self) -> bool {
        self.0 & 0b001 != 0
    }

    pub fn label(self) -> String {
        [self.frame_high(), self.height_high(), self.width_high()]
            .iter()
            .map(|&h| if h { 'H' } else { 'L' })
            .collect()
    }
}

/// The eight half-resolution volumes of a 3D transform, indexed by [`Band3`].
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandSet3D {
    pub bands: [Volume; 8],
}

impl SubbandSet3D {
    pub fn band(&self, b: Band3) -> &Volume {
        &self.bands[b.0 as usize]
    }

    pub fn band_mut(&mut self, b: Band3) -> &mut Volume {
        &mut self.bands[b.0 as usize]
    }

    fn check(&self) -> Result<()> {
        let first = &self.bands[0];
        if self.bands.iter().any(|b| !b.same_shape(first)) {
            return Err(Error::dims("3D subbands have mismatched dimensions"));
        }
        Ok(())
    }

    pub fn energy(&self) -> f64 {
        self.bands.iter().map(|b| sum_sq(&b.data)).sum()
    }
}

pub fn sum_sq(data: &[f32]) -> f64 {
    data.iter().map(|&v| (v as f64) * (v as f64)).sum()
}

fn require_even(what: &str, dims: &[(char, usize)]) -> Result<()> {
    for &(name, n) in dims {
        if n == 0 || n % 2 != 0 {
            return Err(Error::dims(format!(
                "{what}: {name}={n} must be even and positive"
            )));
        }
    }
    Ok(())
}

pub fn dwt2(plane: &Plane) -> Result<SubbandSet2D> {
    require_even("dwt2", &[('H', plane.height), ('W', plane.width)])?;
    let (h2, w2, ch) = (plane.height / 2, plane.width / 2, plane.channels);
    let mut ll = Plane::zeros(h2, w2, ch);
    let mut lh = Plane::zeros(h2, w2, ch);
    let mut hl = Plane::zeros(h2, w2, ch);
    let mut hh = Plane::zeros(h2, w2, ch);
    for i in 0..h2 {
        for j in 0..w2 {
            for c in 0..ch {
                let a = plane.get(2 * i, 2 * j, c);
                let b = plane.get(2 * i, 2 * j + 1, c);
                let d = plane.get(2 * i + 1, 2 * j, c);
                let e = plane.get(2 * i + 1, 2 * j + 1, c);
                // width axis first, then height
                let (top_lo, top_hi) = ((a + b) * FRAC_1_SQRT_2, (a - b) * FRAC_1_SQRT_2);
                let (bot_lo, bot_hi) = ((d + e) * FRAC_1_SQRT_2, (d - e) * FRAC_1_SQRT_2);
                let k = ll.index(i, j, c);
                ll.data[k] = (top_lo + bot_lo) * FRAC_1_SQRT_2;
                hl.data[k] = (top_lo - bot_lo) * FRAC_1_SQRT_2;
                lh.data[k] = (top_hi + bot_hi) * FRAC_1_SQRT_2;
                hh.data[k] = (top_hi - bot_hi) * FRAC_1_SQRT_2;
            }
        }
    }
    Ok(SubbandSet2D { ll, lh, hl, hh })
}

pub fn idwt2(bands: &SubbandSet2D) -> Result<Plane> {
    bands.check()?;
    let (h2, w2, ch) = (bands.ll.height, bands.ll.width, bands.ll.channels);
    let mut out = Plane::zeros(2 * h2, 2 * w2, ch);
    for i in 0..h2 {
        for j in 0..w2 {
            for c in 0..ch {
                let k = bands.ll.index(i, j, c);
                let (ll, lh, hl, hh) = (
                    bands.ll.data[k],
                    bands.lh.data[k],
                    bands.hl.data[k],
                    bands.hh.data[k],
                );
                let top_lo = (ll + hl) * FRAC_1_SQRT_2;
                let bot_lo = (ll - hl) * FRAC_1_SQRT_2;
                let top_hi = (lh + hh) * FRAC_1_SQRT_2;
                let bot_hi = (lh - hh) * FRAC_1_SQRT_2;
                out.set(2 * i, 2 * j, c, (top_lo + top_hi) * FRAC_1_SQRT_2);
                out.set(2 * i, 2 * j + 1, c, (top_lo - top_hi) * FRAC_1_SQRT_2);
                out.set(2 * i + 1, 2 * j, c, (bot_lo + bot_hi) * FRAC_1_SQRT_2);
                out.set(2 * i + 1, 2 * j + 1, c, (bot_lo - bot_hi) * FRAC_1_SQRT_2);
            }
        }
    }
    Ok(out)
}

// One Haar butterfly along each axis of a 2×2×2 cube. Cube index bits follow
// Band3: bit 2 frame, bit 1 height, bit 0 width.
#[inline]
fn butterfly(v: &mut [f32; 8], axis_bit: usize) {
    for p in 0..8 {
        if p & axis_bit == 0 {
            let (a, b) = (v[p], v[p | axis_bit]);
            v[p] = (a + b) * FRAC_1_SQRT_2;
            v[p | axis_bit] = (a - b) * FRAC_1_SQRT_2;
        }
    }
}

#[inline]
fn inverse_butterfly(v: &mut [f32; 8], axis_bit: usize) {
    for p in 0..8 {
        if p & axis_bit == 0 {
            let (lo, hi) = (v[p], v[p | axis_bit]);
            v[p] = (lo + hi) * FRAC_1_SQRT_2;
            v[p | axis_bit] = (lo - hi) * FRAC_1_SQRT_2;
        }
    }
}

/// Separable 3D Haar analysis: frame axis, then height, then width.
pub fn dwt3(vol: &Volume) -> Result<SubbandSet3D> {
    require_even(
        "dwt3",
        &[('F', vol.frames), ('H', vol.height), ('W', vol.width)],
    )?;
    let (f2, h2, w2, ch) = (vol.frames / 2, vol.height / 2, vol.width / 2, vol.channels);
    let mut bands: [Volume; 8] = std::array::from_fn(|_| Volume::zeros(f2, h2, w2, ch));
    let mut cube = [0f32; 8];
    for t in 0..f2 {
        for i in 0..h2 {
            for j in 0..w2 {
                for c in 0..ch {
                    for (p, slot) in cube.iter_mut().enumerate() {
                        *slot = vol.get(
                            2 * t + (p >> 2 & 1),
                            2 * i + (p >> 1 & 1),
                            2 * j + (p & 1),
                            c,
                        );
                    }
                    butterfly(&mut cube, 0b100);
                    butterfly(&mut cube, 0b010);
                    butterfly(&mut cube, 0b001);
                    let k = bands[0].index(t, i, j, c);
                    for (b, band) in bands.iter_mut().enumerate() {
                        band.data[k] = cube[b];
                    }
                }
            }
        }
    }
    Ok(SubbandSet3D { bands })
}

pub fn idwt3(bands: &SubbandSet3D) -> Result<Volume> {
    bands.check()?;
    let b0 = &bands.bands[0];
    let (f2, h2, w2, ch) = (b0.frames, b0.height, b0.width, b0.channels);
    let mut out = Volume::zeros(2 * f2, 2 * h2, 2 * w2, ch);
    let mut cube = [0f32; 8];
    for t in 0..f2 {
        for i in 0..h2 {
            for j in 0..w2 {
                for c in 0..ch {
                    let k = b0.index(t, i, j, c);
                    for (b, slot) in cube.iter_mut().enumerate() {
                        *slot = bands.bands[b].data[k];
                    }
                    inverse_butterfly(&mut cube, 0b001);
                    inverse_butterfly(&mut cube, 0b010);
                    inverse_butterfly(&mut cube, 0b100);
                    for (p, &v) in cube.iter().enumerate() {
                        out.set(
                            2 * t + (p >> 2 & 1),
                            2 * i + (p >> 1 & 1),
                            2 * j + (p & 1),
                            c,
                            v,
                        );
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Tiles the four subbands into one plane: LL top-left, LH top-right,
/// HL bottom-left, HH bottom-right.
pub fn mosaic2(bands: &SubbandSet2D) -> Result<Plane> {
    bands.check()?;
    let (h2, w2, ch) = (bands.ll.height, bands.ll.width, bands.ll.channels);
    let mut out = Plane::zeros(2 * h2, 2 * w2, ch);
    out.paste(&bands.ll, 0, 0)?;
    out.paste(&bands.lh, 0, w2)?;
    out.paste(&bands.hl, h2, 0)?;
    out.paste(&bands.hh, h2, w2)?;
    Ok(out)
}

/// Inverse of [`mosaic2`]; an exact index permutation.
pub fn unmosaic2(plane: &Plane) -> Result<SubbandSet2D> {
    require_even("unmosaic2", &[('H', plane.height), ('W', plane.width)])?;
    let (h2, w2) = (plane.height / 2, plane.width / 2);
    Ok(SubbandSet2D {
        ll: plane.crop(0, 0, h2, w2)?,
        lh: plane.crop(0, w2, h2, w2)?,
        hl: plane.crop(h2, 0, h2, w2)?,
        hh: plane.crop(h2, w2, h2, w2)?,
    })
}

/// Tiles the eight subbands into one volume. Along each axis the first half
/// holds the bands that are low-pass on that axis.
pub fn mosaic3(bands: &SubbandSet3D) -> Result<Volume> {
    bands.check()?;
    let b0 = &bands.bands[0];
    let (f2, h2, w2, ch) = (b0.frames, b0.height, b0.width, b0.channels);
    let mut out = Volume::zeros(2 * f2, 2 * h2, 2 * w2, ch);
    for (b, band) in bands.bands.iter().enumerate() {
        let (ft, hy, wx) = ((b >> 2 & 1) * f2, (b >> 1 & 1) * h2, (b & 1) * w2);
        for t in 0..f2 {
            for y in 0..h2 {
                let src = band.index(t, y, 0, 0);
                let dst = out.index(ft + t, hy + y, wx, 0);
                out.data[dst..dst + w2 * ch].copy_from_slice(&band.data[src..src + w2 * ch]);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`mosaic3`]; an exact index permutation.
pub fn unmosaic3(vol: &Volume) -> Result<SubbandSet3D> {
    require_even(
        "unmosaic3",
        &[('F', vol.frames), ('H', vol.height), ('W', vol.width)],
    )?;
    let (f2, h2, w2, ch) = (vol.frames / 2, vol.height / 2, vol.width / 2, vol.channels);
    let bands = std::array::from_fn(|b| {
        let mut band = Volume::zeros(f2, h2, w2, ch);
        let (ft, hy, wx) = ((b >> 2 & 1) * f2, (b >> 1 & 1) * h2, (b & 1) * w2);
        for t in 0..f2 {
            for y in 0..h2 {
                let src = vol.index(ft + t, hy + y, wx, 0);
                let dst = band.index(t, y, 0, 0);
                band.data[dst..dst + w2 * ch].copy_from_slice(&vol.data[src..src + w2 * ch]);
            }
        }
        band
    });
    Ok(SubbandSet3D { bands })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SQRT2: f32 = std::f32::consts::SQRT_2;

    fn random_plane(h: usize, w: usize, c: usize, seed: u64) -> Plane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Plane::from_vec(
            h,
            w,
            c,
            (0..h * w * c)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn random_volume(f: usize, h: usize, w: usize, c: usize, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_vec(
            f,
            h,
            w,
            c,
            (0..f * h * w * c)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn max_err(a: &[f32], b: &[f32]) -> f32 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max)
    }

    #[test]
    fn constant_plane_goes_to_ll() {
        let c = 0.37;
        let b = dwt2(&Plane::filled(4, 4, 1, c)).unwrap();
        assert!(b.ll.data.iter().all(|&v| (v - 2.0 * c).abs() < 1e-6));
        for band in [&b.lh, &b.hl, &b.hh] {
            assert!(band.data.iter().all(|&v| v.abs() < 1e-6));
        }
    }

    #[test]
    fn width_alternation_lands_in_lh() {
        // [[1,-1],[1,-1]] varies along width only: low along height, high
        // along width, and a - b = 2 gives a positive coefficient.
        let p = Plane::from_vec(2, 2, 1, vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let b = dwt2(&p).unwrap();
        assert!(b.ll.data[0].abs() < 1e-6);
        assert!((b.lh.data[0] - 2.0).abs() < 1e-6);
        assert!(b.hl.data[0].abs() < 1e-6);
        assert!(b.hh.data[0].abs() < 1e-6);

        let q = Plane::from_vec(2, 2, 1, vec![1.0, 1.0, -1.0, -1.0]).unwrap();
        let b = dwt2(&q).unwrap();
        assert!((b.hl.data[0] - 2.0).abs() < 1e-6);
        assert!(b.lh.data[0].abs() < 1e-6);
    }

    #[test]
    fn idwt2_examples() {
        let c = 0.6;
        let bands = SubbandSet2D {
            ll: Plane::filled(2, 3, 2, 2.0 * c),
            lh: Plane::zeros(2, 3, 2),
            hl: Plane::zeros(2, 3, 2),
            hh: Plane::zeros(2, 3, 2),
        };
        let p = idwt2(&bands).unwrap();
        assert_eq!((p.height, p.width), (4, 6));
        assert!(p.data.iter().all(|&v| (v - c).abs() < 1e-6));

        let zero = SubbandSet2D {
            ll: Plane::zeros(2, 2, 1),
            lh: Plane::zeros(2, 2, 1),
            hl: Plane::zeros(2, 2, 1),
            hh: Plane::zeros(2, 2, 1),
        };
        assert!(idwt2(&zero).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn roundtrip_2d() {
        for (h, w, c, seed) in [(8, 8, 3, 1), (16, 16, 1, 2), (2, 6, 2, 3)] {
            let p = random_plane(h, w, c, seed);
            let back = idwt2(&dwt2(&p).unwrap()).unwrap();
            assert!(max_err(&p.data, &back.data) < 1e-5);
        }
    }

    #[test]
    fn odd_dims_rejected() {
        assert!(dwt2(&Plane::zeros(3, 4, 1)).is_err());
        assert!(dwt3(&Volume::zeros(3, 4, 4, 1)).is_err());
        assert!(dwt3(&Volume::zeros(2, 4, 5, 1)).is_err());
    }

    #[test]
    fn mismatched_bands_rejected() {
        let bands = SubbandSet2D {
            ll: Plane::zeros(2, 2, 1),
            lh: Plane::zeros(2, 3, 1),
            hl: Plane::zeros(2, 2, 1),
            hh: Plane::zeros(2, 2, 1),
        };
        assert!(idwt2(&bands).is_err());
        assert!(mosaic2(&bands).is_err());
    }

    #[test]
    fn constant_volume_goes_to_lll() {
        let c = 0.25;
        let b = dwt3(&Volume::filled(2, 2, 2, 1, c)).unwrap();
        assert!((b.band(Band3::LLL).data[0] - 2.0 * SQRT2 * c).abs() < 1e-6);
        for k in 1..8 {
            assert!(b.bands[k].data[0].abs() < 1e-6);
        }
        let back = idwt3(&b).unwrap();
        assert!(back.data.iter().all(|&v| (v - c).abs() < 1e-6));
    }

    #[test]
    fn frame_alternation_lands_in_hll() {
        let mut v = Volume::zeros(4, 4, 4, 2);
        for t in 0..4 {
            let s = if t % 2 == 0 { 1.0 } else { -1.0 };
            v.frame_slice_mut(t).fill(s);
        }
        let b = dwt3(&v).unwrap();
        let total = b.energy();
        let hll = sum_sq(&b.band(Band3::HLL).data);
        assert!((hll - total).abs() < 1e-6 * total);
        assert!((total - sum_sq(&v.data)).abs() < 1e-4 * total);
    }

    #[test]
    fn roundtrip_3d() {
        for (f, h, w, c, seed) in [(4, 8, 8, 3, 5), (2, 4, 4, 1, 6)] {
            let v = random_volume(f, h, w, c, seed);
            let back = idwt3(&dwt3(&v).unwrap()).unwrap();
            assert!(max_err(&v.data, &back.data) < 1e-5);
        }
    }

    #[test]
    fn zero_bands_give_zero_volume() {
        let bands = SubbandSet3D {
            bands: std::array::from_fn(|_| Volume::zeros(1, 2, 2, 1)),
        };
        let v = idwt3(&bands).unwrap();
        assert_eq!(v.shape(), [2, 4, 4, 1]);
        assert!(v.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mosaic2_placement() {
        let bands = SubbandSet2D {
            ll: Plane::filled(2, 2, 1, 1.0),
            lh: Plane::filled(2, 2, 1, 2.0),
            hl: Plane::filled(2, 2, 1, 3.0),
            hh: Plane::filled(2, 2, 1, 4.0),
        };
        let m = mosaic2(&bands).unwrap();
        #[rustfmt::skip]
        let expect = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(m.data, expect);
        assert_eq!(unmosaic2(&m).unwrap(), bands);
    }

    #[test]
    fn mosaic2_of_dwt_is_bit_exact() {
        let b = dwt2(&random_plane(8, 8, 1, 9)).unwrap();
        assert_eq!(unmosaic2(&mosaic2(&b).unwrap()).unwrap(), b);
    }

    #[test]
    fn mosaic3_octant_order() {
        let bands = SubbandSet3D {
            bands: std::array::from_fn(|b| Volume::filled(1, 1, 1, 1, (b + 1) as f32)),
        };
        let v = mosaic3(&bands).unwrap();
        assert_eq!(v.data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(unmosaic3(&v).unwrap(), bands);
    }

    #[test]
    fn mosaic3_of_dwt_is_bit_exact() {
        let b = dwt3(&random_volume(4, 4, 4, 2, 10)).unwrap();
        assert_eq!(unmosaic3(&mosaic3(&b).unwrap()).unwrap(), b);
    }

    #[test]
    fn band_labels() {
        assert_eq!(Band3::LLH.label(), "LLH");
        assert_eq!(Band3::HLL.label(), "HLL");
        assert!(Band3::HLL.frame_high() && !Band3::HLL.width_high());
    }
}
