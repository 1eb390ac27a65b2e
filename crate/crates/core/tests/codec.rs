//! H.264 round trips through an external ffmpeg. Every leg prints a skip
//! notice instead of running when the encoder is not available.

use patchmark::distortion::{h264_roundtrip, FFMPEG_ENV};
use patchmark::metrics::psnr;
use patchmark::synth::natural_video;
use patchmark::{Error, FrameSequence, Volume};

fn db(a: &FrameSequence, b: &FrameSequence) -> f64 {
    psnr(&a.data, &b.data).unwrap().db()
}

// One test function: the env var is process-wide.
#[test]
fn h264_codec_legs() {
    let saved = std::env::var_os(FFMPEG_ENV);
    std::env::set_var(FFMPEG_ENV, "/nonexistent/ffmpeg-binary");
    let v = natural_video(2, 64, 64, 3, 1);
    assert!(matches!(
        h264_roundtrip(&v, 24),
        Err(Error::CodecUnavailable(_))
    ));
    match saved {
        Some(p) => std::env::set_var(FFMPEG_ENV, p),
        None => std::env::remove_var(FFMPEG_ENV),
    }

    let v = natural_video(8, 320, 512, 3, 2);
    let lossless = match h264_roundtrip(&v, 0) {
        Err(Error::CodecUnavailable(msg)) => {
            println!("SKIP h264 legs: codec unavailable: {msg}");
            return;
        }
        r => r.unwrap(),
    };
    assert!(db(&v, &lossless) >= 50.0);
    let q18 = db(&v, &h264_roundtrip(&v, 18).unwrap());
    let q24 = db(&v, &h264_roundtrip(&v, 24).unwrap());
    println!("h264 PSNR: CRF 18 {q18:.2} dB, CRF 24 {q24:.2} dB");
    assert!(q24 < q18);

    let flat = FrameSequence::new(Volume::filled(2, 64, 64, 3, 0.4)).unwrap();
    let out = h264_roundtrip(&flat, 24).unwrap();
    let worst = flat
        .data
        .iter()
        .zip(&out.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f32::max);
    assert!(worst <= 2.0 / 255.0 + 1e-6, "{worst}");
}
