use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use patchmark::distortion::{self, AttackRecord, DistortionSpec, DEFAULT_CRF};
use patchmark::embedder::{KeyFile, QimConfig, DEFAULT_BIT_DEPTH, DEFAULT_DELTA};
use patchmark::io::{load_frames, load_watermark, read_png, save_frames, write_atomic, write_png};
use patchmark::matching::DEFAULT_PATCH_SIZE;
use patchmark::metrics::{evaluate, DEFAULT_LAMBDA};
use patchmark::pipeline::{embed_video, extract_watermark};
use patchmark::scanning::{scan_2d_freq, scan_3d_local, scan_3d_vanilla, ScanDirection, ScanOrder};
use patchmark::ssm::{
    random_feature_map, selective_scan, SfMamba3d, SfMambaStack, SsmParams, BOTH_DIRECTIONS,
};
use patchmark::Error;

#[derive(Parser)]
#[command(
    name = "patchmark",
    version,
    about = "Blind graphical watermarking for frame sequences"
)]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Print a short summary to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Embed a watermark image into a video and write the extraction key.
    Embed {
        /// Frame directory, .y4m file, or - for y4m on stdin.
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        watermark: PathBuf,
        /// Output frame directory, .y4m file, or - for stdout.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        dump_plan: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_DELTA)]
        delta: f64,
        #[arg(long, default_value_t = DEFAULT_BIT_DEPTH)]
        bit_depth: usize,
        #[arg(long, default_value_t = DEFAULT_PATCH_SIZE)]
        patch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Recover the watermark from a (possibly attacked) video.
    Extract {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dump_positions: Option<PathBuf>,
        /// Attack record whose geometric part is undone before extraction.
        #[arg(long)]
        undo_record: Option<PathBuf>,
    },
    /// Apply one distortion.
    Attack {
        #[arg(long)]
        video: PathBuf,
        #[arg(long, value_enum)]
        kind: AttackKind,
        /// Erased area fraction in [0.05, 0.20].
        #[arg(long)]
        ratio: Option<f64>,
        /// Blur kernel: 3, 5 or 7.
        #[arg(long)]
        kernel: Option<usize>,
        /// Noise sigma in [0, 0.2]; sampled from U(0, 0.2) when omitted.
        #[arg(long)]
        sigma: Option<f64>,
        /// Degrees in (-30, 30); sampled when omitted.
        #[arg(long, allow_hyphen_values = true)]
        angle: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_CRF)]
        crf: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        record: PathBuf,
    },
    /// Compare original/marked videos and original/recovered watermarks.
    Eval {
        #[arg(long)]
        orig: PathBuf,
        #[arg(long)]
        marked: PathBuf,
        #[arg(long)]
        wm: PathBuf,
        #[arg(long)]
        rec: PathBuf,
        #[arg(long, default_value_t = DEFAULT_LAMBDA)]
        lambda: f64,
        /// Append a single-line JSON summary.
        #[arg(long)]
        json: bool,
    },
    /// Print scan orders for small dimensions and run the demo block stacks.
    ScanDemo {
        #[arg(long, default_value_t = 2)]
        frames: usize,
        #[arg(long, default_value_t = 4)]
        height: usize,
        #[arg(long, default_value_t = 4)]
        width: usize,
        #[arg(long, default_value_t = 4)]
        channels: usize,
        #[arg(long, default_value_t = 8)]
        state: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Throughput of the selective scan and of one 3D block.
    ScanBench {
        #[arg(long, default_value_t = 4096)]
        len: usize,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 16)]
        state: usize,
        #[arg(long, default_value_t = 4)]
        frames: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 5)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackKind {
    None,
    Erase,
    Blur,
    Noise,
    Rotate,
    H264,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::CodecUnavailable(_)) => 4,
        Some(Error::Invariant(_)) => 5,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(5);
        }
    }
    match run(cli.command, cli.verbose) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn one_line(e: &anyhow::Error) -> String {
    let s = format!("{e:#}");
    s.lines().collect::<Vec<_>>().join(" ")
}

fn read_text(path: &Path, what: &str) -> anyhow::Result<String> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf())).context(format!("reading {what}"));
    }
    Ok(std::fs::read_to_string(path).map_err(Error::Io)?)
}

fn run(cmd: Cmd, verbose: bool) -> anyhow::Result<()> {
    match cmd {
        Cmd::Embed {
            video,
            watermark,
            out,
            key,
            dump_plan,
            delta,
            bit_depth,
            patch_size,
            seed,
        } => {
            let cfg = QimConfig {
                delta,
                bit_depth,
                patch_size,
                seed,
            };
            let w = load_watermark(&watermark, patch_size)?;
            let v = load_frames(&video)?;
            let e = embed_video(&v, &w, &cfg)?;
            write_atomic(&key, e.key.to_text().as_bytes())?;
            if let Some(p) = dump_plan {
                write_atomic(&p, e.plan.to_text().as_bytes())?;
            }
            save_frames(&e.video, &out)?;
            if verbose {
                eprintln!(
                    "embedded {} patches into {} frames (grid {}x{}, R={})",
                    e.plan.len(),
                    v.frames,
                    e.key.grid.0,
                    e.key.grid.1,
                    e.key.replicas
                );
            }
        }
        Cmd::Extract {
            video,
            key,
            out,
            dump_positions,
            undo_record,
        } => {
            let key = KeyFile::parse(&read_text(&key, "key")?)?;
            let mut v = load_frames(&video)?;
            if let Some(r) = undo_record {
                let rec = AttackRecord::parse(&read_text(&r, "attack record")?)?;
                v = distortion::invert(&v, &rec)?;
            }
            let r = extract_watermark(&v, &key)?;
            if let Some(p) = dump_positions {
                let mut text = String::new();
                for d in &r.decoded {
                    text.push_str(&format!(
                        "{}:{} -> {} ({:.4})\n",
                        d.frame, d.region, d.index, d.confidence
                    ));
                }
                write_atomic(&p, text.as_bytes())?;
            }
            write_png(&r.watermark, &out)?;
            if verbose {
                let mean = r.selected.iter().map(|d| d.confidence).sum::<f64>()
                    / r.selected.len().max(1) as f64;
                eprintln!(
                    "recovered {} patches, mean confidence {mean:.4}",
                    r.selected.len()
                );
            }
        }
        Cmd::Attack {
            video,
            kind,
            ratio,
            kernel,
            sigma,
            angle,
            crf,
            seed,
            out,
            record,
        } => {
            let spec = match kind {
                AttackKind::None => DistortionSpec::None,
                AttackKind::Erase => DistortionSpec::Erase {
                    ratio: ratio.context("--ratio is required for erase")?,
                },
                AttackKind::Blur => DistortionSpec::Blur {
                    kernel: kernel.context("--kernel is required for blur")?,
                },
                AttackKind::Noise => DistortionSpec::Noise { sigma },
                AttackKind::Rotate => DistortionSpec::Rotate { angle },
                AttackKind::H264 => DistortionSpec::H264 { crf },
            };
            let v = load_frames(&video)?;
            let (a, rec) = distortion::apply(&v, &spec, seed)?;
            save_frames(&a, &out)?;
            write_atomic(&record, rec.to_text().as_bytes())?;
        }
        Cmd::Eval {
            orig,
            marked,
            wm,
            rec,
            lambda,
            json,
        } => {
            let v = load_frames(&orig)?;
            let vh = load_frames(&marked)?;
            let w = read_png(&wm)?;
            let wh = read_png(&rec)?;
            let report = evaluate(&v, &vh, &w, &wh, lambda)?;
            print!("{}", report.to_kv());
            if json {
                println!("{}", serde_json::to_string(&report)?);
            }
        }
        Cmd::ScanDemo {
            frames,
            height,
            width,
            channels,
            state,
            seed,
        } => scan_demo(frames, height, width, channels, state, seed)?,
        Cmd::ScanBench {
            len,
            channels,
            state,
            frames,
            height,
            width,
            iters,
            seed,
        } => scan_bench(len, channels, state, [frames, height, width], iters, seed)?,
    }
    Ok(())
}

fn print_order(name: &str, o: &ScanOrder) {
    let s: Vec<String> = o.forward().iter().map(|i| i.to_string()).collect();
    println!("{name}: {}", s.join(" "));
}

fn scan_demo(
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    state: usize,
    seed: u64,
) -> anyhow::Result<()> {
    print_order("freq2d", &scan_2d_freq(height, width)?);
    print_order(
        "local3d.forward",
        &scan_3d_local(frames, height, width, ScanDirection::Forward)?,
    );
    print_order(
        "local3d.reverse",
        &scan_3d_local(frames, height, width, ScanDirection::Reverse)?,
    );
    print_order("vanilla3d", &scan_3d_vanilla(frames, height, width));
    let x = random_feature_map(frames, height, width, channels, 3.0, seed);
    for (name, stack) in [
        (
            "embed_network",
            SfMambaStack::embed_network(channels, state, seed),
        ),
        (
            "extract_network",
            SfMambaStack::extract_network(channels, state, seed),
        ),
    ] {
        let y = stack.forward(&x)?;
        let max = y.data.iter().fold(0f32, |m, v| m.max(v.abs()));
        let mean = y.data.iter().map(|&v| v as f64).sum::<f64>() / y.data.len() as f64;
        println!(
            "{name}: blocks={} shape={:?} mean={mean:.6} max_abs={max:.6}",
            stack.blocks.len(),
            y.shape()
        );
    }
    Ok(())
}

fn scan_bench(
    len: usize,
    channels: usize,
    state: usize,
    dims: [usize; 3],
    iters: usize,
    seed: u64,
) -> anyhow::Result<()> {
    if iters == 0 || len == 0 || channels == 0 {
        bail!(Error::Parameter(
            "len, channels and iters must be positive".into()
        ));
    }
    let x = random_feature_map(1, 1, len, channels, 1.0, seed).data;
    let params = SsmParams::constant(len, channels, state, 0.9, 0.1, 1.0, 1.0);
    let start = Instant::now();
    for _ in 0..iters {
        std::hint::black_box(selective_scan(&x, &params)?);
    }
    let secs = start.elapsed().as_secs_f64();
    let elems = (len * channels * iters) as f64;
    println!(
        "selective_scan L={len} D={channels} N={state}: {:.3e} elements/s",
        elems / secs
    );

    let [f, h, w] = dims;
    let vol = random_feature_map(f, h, w, channels, 3.0, seed);
    let block = SfMamba3d::seeded(channels, state, seed);
    let start = Instant::now();
    for _ in 0..iters {
        std::hint::black_box(block.forward(&vol, &BOTH_DIRECTIONS)?);
    }
    let secs = start.elapsed().as_secs_f64();
    let elems = (vol.data.len() * iters) as f64;
    println!(
        "sfmamba3d F={f} H={h} W={w} D={channels} N={state}: {:.3e} elements/s",
        elems / secs
    );
    Ok(())
}
