//! Runs the built binary on small generated inputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use patchmark::embedder::quantize_plane;
use patchmark::io::{read_png, save_frames, write_png};
use patchmark::synth::{logo, natural_video};
use patchmark::Plane;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_patchmark"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Inputs {
    dir: tempfile::TempDir,
    video: PathBuf,
    wm: PathBuf,
}

fn inputs(seed: u64) -> Inputs {
    let dir = tempfile::tempdir().unwrap();
    let video = dir.path().join("video");
    let wm = dir.path().join("wm.png");
    save_frames(&natural_video(8, 320, 512, 3, seed), &video).unwrap();
    write_png(&logo(256, 3, seed), &wm).unwrap();
    Inputs { dir, video, wm }
}

fn embed(inp: &Inputs, threads: &str, tag: &str) -> (PathBuf, PathBuf) {
    let out = inp.dir.path().join(format!("marked-{tag}"));
    let key = inp.dir.path().join(format!("key-{tag}.txt"));
    let o = run(&[
        "--threads",
        threads,
        "embed",
        "--video",
        s(&inp.video),
        "--watermark",
        s(&inp.wm),
        "--out",
        s(&out),
        "--key",
        s(&key),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    (out, key)
}

fn read_pngs(dir: &Path) -> Vec<Vec<u8>> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    names.sort();
    names.iter().map(|p| fs::read(p).unwrap()).collect()
}

#[test]
fn embed_then_extract_recovers_quantized_watermark() {
    let inp = inputs(1);
    let (marked, key) = embed(&inp, "4", "a");
    let rec = inp.dir.path().join("rec.png");
    let o = run(&[
        "extract",
        "--video",
        s(&marked),
        "--key",
        s(&key),
        "--out",
        s(&rec),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let got = read_png(&rec).unwrap();
    assert_eq!(got, quantize_plane(&read_png(&inp.wm).unwrap(), 4));

    let o = run(&[
        "eval",
        "--orig",
        s(&inp.video),
        "--marked",
        s(&marked),
        "--wm",
        s(&inp.wm),
        "--rec",
        s(&rec),
        "--json",
    ]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let psnr: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("video.psnr="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(psnr >= 40.0, "{psnr}");
    assert!(text.contains("loss.total="));
    let json = text.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(json).unwrap();
    assert!(v["watermark"]["psnr"].as_f64().unwrap() >= 29.0);
}

#[test]
fn indivisible_watermark_is_rejected() {
    let inp = inputs(2);
    let bad = inp.dir.path().join("bad.png");
    write_png(&Plane::filled(250, 250, 3, 0.3), &bad).unwrap();
    let o = run(&[
        "embed",
        "--video",
        s(&inp.video),
        "--watermark",
        s(&bad),
        "--out",
        s(&inp.dir.path().join("o")),
        "--key",
        s(&inp.dir.path().join("k")),
    ]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("dimensions not divisible by patch size"),
        "{err}"
    );
}

#[test]
fn noise_attack_then_extract_exits_cleanly() {
    let inp = inputs(3);
    let (marked, key) = embed(&inp, "4", "n");
    let noisy = inp.dir.path().join("noisy");
    let record = inp.dir.path().join("attack.txt");
    let o = run(&[
        "attack",
        "--video",
        s(&marked),
        "--kind",
        "noise",
        "--sigma",
        "0.05",
        "--seed",
        "7",
        "--out",
        s(&noisy),
        "--record",
        s(&record),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_to_string(&record).unwrap().contains("noise"));
    let rec = inp.dir.path().join("rec.png");
    let o = run(&[
        "extract",
        "--video",
        s(&noisy),
        "--key",
        s(&key),
        "--out",
        s(&rec),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_png(&rec).unwrap().height, 256);
}

#[test]
fn rotation_is_undone_from_the_record() {
    let inp = inputs(4);
    let (marked, key) = embed(&inp, "4", "r");
    let rotated = inp.dir.path().join("rot");
    let record = inp.dir.path().join("rot.txt");
    let o = run(&[
        "attack",
        "--video",
        s(&marked),
        "--kind",
        "rotate",
        "--angle",
        "-10",
        "--out",
        s(&rotated),
        "--record",
        s(&record),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dump = inp.dir.path().join("pos.txt");
    let o = run(&[
        "extract",
        "--video",
        s(&rotated),
        "--key",
        s(&key),
        "--out",
        s(&inp.dir.path().join("rec.png")),
        "--undo-record",
        s(&record),
        "--dump-positions",
        s(&dump),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&dump).unwrap().lines().count(), 256);
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let inp = inputs(5);
    let (m1, k1) = embed(&inp, "1", "t1");
    let (m4, k4) = embed(&inp, "4", "t4");
    assert_eq!(fs::read(&k1).unwrap(), fs::read(&k4).unwrap());
    assert_eq!(read_pngs(&m1), read_pngs(&m4));
    let mut attacked = Vec::new();
    for t in ["1", "4"] {
        let out = inp.dir.path().join(format!("blur-{t}"));
        let record = inp.dir.path().join(format!("blur-{t}.txt"));
        let o = run(&[
            "--threads",
            t,
            "attack",
            "--video",
            s(&m1),
            "--kind",
            "blur",
            "--kernel",
            "5",
            "--out",
            s(&out),
            "--record",
            s(&record),
        ]);
        assert!(o.status.success());
        let rec = inp.dir.path().join(format!("rec-{t}.png"));
        let o = run(&[
            "--threads",
            t,
            "extract",
            "--video",
            s(&out),
            "--key",
            s(&k1),
            "--out",
            s(&rec),
        ]);
        assert!(o.status.success());
        attacked.push((
            read_pngs(&out),
            fs::read(&record).unwrap(),
            fs::read(&rec).unwrap(),
        ));
    }
    assert!(attacked[0] == attacked[1]);
}

#[test]
fn missing_codec_exits_with_code_4() {
    let inp = inputs(6);
    let o = bin()
        .env("PATCHMARK_FFMPEG", "/nonexistent/ffmpeg-binary")
        .args([
            "attack",
            "--video",
            s(&inp.video),
            "--kind",
            "h264",
            "--out",
            s(&inp.dir.path().join("o")),
            "--record",
            s(&inp.dir.path().join("r")),
        ])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn usage_errors_exit_with_code_2() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["attack", "--kind", "noise"]).status.code(), Some(2));
}

#[test]
fn scan_demo_prints_hand_orders() {
    let o = run(&[
        "scan-demo",
        "--frames",
        "2",
        "--height",
        "2",
        "--width",
        "2",
    ]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(
        text.contains("0 1 2 4 3 5 6 7") || text.contains("[0, 1, 2, 4, 3, 5, 6, 7]"),
        "{text}"
    );
}
