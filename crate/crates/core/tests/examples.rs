//! Worked examples measured on full-size or Monte Carlo inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use patchmark::distortion::{self, DistortionSpec, ERASE_FILL};
use patchmark::embedder::{qim_decode_bits, qim_embed_bits, quantize_plane, QimConfig};
use patchmark::io::{load_frames, save_frames};
use patchmark::metrics::{evaluate, psnr, Psnr};
use patchmark::pipeline::{embed_video, extract_watermark};
use patchmark::synth::{logo, natural_video};
use patchmark::{FrameSequence, Volume, WatermarkImage};

fn qim_ber(sigma: f64, delta: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let host = Uniform::new(0.0f64, 2.0).unwrap();
    let n = 200_000;
    let coeffs: Vec<f64> = (0..n).map(|_| host.sample(&mut rng)).collect();
    let bits: Vec<u8> = (0..n).map(|i| ((i * 7919 + 13) % 2) as u8).collect();
    let mut marked = qim_embed_bits(&coeffs, &bits, delta).unwrap();
    let noise = Normal::new(0.0, sigma).unwrap();
    marked.iter_mut().for_each(|c| *c += noise.sample(&mut rng));
    let got = qim_decode_bits(&marked, n, delta).unwrap();
    got.iter().zip(&bits).filter(|(a, b)| a != b).count() as f64 / n as f64
}

#[test]
fn qim_error_rate_grows_with_noise() {
    let delta = 0.03;
    let rates: Vec<f64> = [delta / 4.0, delta / 2.0, delta]
        .iter()
        .map(|&s| qim_ber(s, delta, 17))
        .collect();
    assert!(rates[0] < rates[1] && rates[1] < rates[2], "{rates:?}");
    assert!(rates[2] > 0.0 && rates[2] < 0.5, "{rates:?}");
}

#[test]
fn qim_survives_noise_below_half_step() {
    let delta = 0.03;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let host = Uniform::new(0.0f64, 2.0).unwrap();
    let amp = Uniform::new(-0.499 * delta, 0.499 * delta).unwrap();
    let coeffs: Vec<f64> = (0..10_000).map(|_| host.sample(&mut rng)).collect();
    let bits: Vec<u8> = (0..10_000).map(|i| (i % 3 == 0) as u8).collect();
    let mut marked = qim_embed_bits(&coeffs, &bits, delta).unwrap();
    marked.iter_mut().for_each(|c| *c += amp.sample(&mut rng));
    assert_eq!(qim_decode_bits(&marked, bits.len(), delta).unwrap(), bits);
}

#[test]
fn small_delta_keeps_video_above_46_db() {
    let v = natural_video(8, 320, 512, 3, 21);
    let w = WatermarkImage::new(logo(256, 3, 22), 16).unwrap();
    let cfg = QimConfig {
        delta: 0.01,
        ..QimConfig::default()
    };
    let e = embed_video(&v, &w, &cfg).unwrap();
    let db = psnr(&v.data, &e.video.data).unwrap().db();
    assert!(db >= 46.0, "video PSNR {db:.2} dB");
}

#[test]
fn recovered_logos_clear_29_db() {
    for seed in 0..10 {
        let v = natural_video(8, 320, 512, 3, 200 + seed);
        let w = WatermarkImage::new(logo(256, 3, 300 + seed), 16).unwrap();
        let e = embed_video(&v, &w, &QimConfig::default()).unwrap();
        let r = extract_watermark(&e.video, &e.key).unwrap();
        assert_eq!(r.watermark, quantize_plane(&w, 4));
        let db = psnr(&w.data, &r.watermark.data).unwrap().db();
        assert!(db >= 29.0, "logo {seed}: {db:.2} dB");
    }
}

#[test]
fn full_size_png_round_trip() {
    let v = natural_video(8, 320, 512, 3, 8);
    let dir = tempfile::tempdir().unwrap();
    save_frames(&v, dir.path()).unwrap();
    let back = load_frames(dir.path()).unwrap();
    assert_eq!(back.shape(), [8, 320, 512, 3]);
    let worst = v
        .data
        .iter()
        .zip(&back.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f32::max);
    assert!(worst <= 1.0 / 255.0, "{worst}");
}

#[test]
fn uniform_offset_of_one_hundredth_is_40_db() {
    let v = Volume::filled(2, 16, 16, 3, 0.5);
    let shifted = Volume::filled(2, 16, 16, 3, 0.51);
    let db = psnr(&v.data, &shifted.data).unwrap().db();
    assert!((db - 40.0).abs() < 1e-4, "{db}");
    assert_eq!(psnr(&v.data, &v.data).unwrap(), Psnr::Identical);
}

#[test]
fn identical_inputs_score_perfectly() {
    let v = natural_video(2, 32, 32, 3, 4);
    let w = logo(32, 3, 4);
    let r = evaluate(&v, &v, &w, &w, 0.75).unwrap();
    assert_eq!(r.video.ssim, 1.0);
    assert_eq!(r.losses.l_total, 0.0);
}

#[test]
fn erase_on_black_video_fills_the_requested_area() {
    let v = FrameSequence::new(Volume::zeros(3, 320, 512, 1)).unwrap();
    for seed in 0..5 {
        let (out, rec) =
            distortion::apply(&v, &DistortionSpec::Erase { ratio: 0.2 }, seed).unwrap();
        let (_, _, h, w) = rec.rect.unwrap();
        let target = (0.2 * 320.0 * 512.0f64).floor() as usize;
        for t in 0..3 {
            let filled = out
                .frame_slice(t)
                .iter()
                .filter(|&&s| s == ERASE_FILL)
                .count();
            assert_eq!(filled, h * w);
            assert!(filled.abs_diff(target) <= h.max(w), "{filled} vs {target}");
        }
    }
}
