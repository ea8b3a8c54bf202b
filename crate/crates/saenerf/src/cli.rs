//! Command-line front end: `simulate` renders a toy scene into an event
//! stream, `train` fits a field to it, `render` produces frames from a
//! checkpoint, `eval` scores renders against references, and `diag` flattens
//! a training log into CSV.
//!
//! Exit codes: 0 on success, 2 when an input or flag is rejected, 3 when a
//! run fails after validation. `SAENERF_THREADS` caps the worker pool.

use std::collections::BTreeMap;
use std::env;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::eval::report;
use crate::events::{read_events, simulate_events, write_events, BayerPattern};
use crate::field::FieldParams;
use crate::geometry::{CameraIntrinsics, KeyframeTrajectory, OrbitTrajectory, Trajectory};
use crate::renderer::{render_image, Image, RenderConfig};
use crate::scene::{frame_times, render_ground_truth, sensor_log_frames, ToyScene};
use crate::trainer::{load_checkpoint, StepRecord, TrainConfig, TrainError, Trainer};

const EXIT_OK: i32 = 0;
const EXIT_VALIDATION: i32 = 2;
const EXIT_RUNTIME: i32 = 3;

/// Stderr progress cadence for `train`, in steps.
const PROGRESS_EVERY: u64 = 100;

#[derive(Parser)]
#[command(name = "saenerf", version, about = "Event-stream radiance field toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a toy scene along a fixed orbit and convert it to events.
    Simulate(SimulateArgs),
    /// Fit a radiance field to an event stream.
    Train(TrainArgs),
    /// Render frames from a checkpoint or a toy scene along a camera path.
    Render(RenderArgs),
    /// Score rendered frames against same-named reference frames.
    Eval(EvalArgs),
    /// Flatten a training log into a CSV of per-step diagnostics.
    Diag(DiagArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scene preset name (two-blobs, box-and-sphere) or scene JSON path.
    #[arg(long)]
    scene: String,
    /// Output event file.
    #[arg(long)]
    out: PathBuf,
    /// Sensor snapshots over one orbit; more frames resolve faster motion.
    #[arg(long, default_value_t = 120)]
    frames: usize,
    /// Orbit period in seconds; also the capture duration.
    #[arg(long, default_value_t = 4.0)]
    period: f64,
    /// Log-intensity contrast threshold.
    #[arg(long, default_value_t = 0.25)]
    threshold: f64,
    /// Spurious events appended, as a fraction of the genuine count.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Color filter: RGGB or mono.
    #[arg(long, default_value = "RGGB")]
    pattern: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Square sensor resolution in pixels.
    #[arg(long, default_value_t = 64)]
    res: u32,
}

#[derive(Args)]
struct TrainArgs {
    /// Input event file.
    #[arg(long)]
    events: PathBuf,
    /// Training config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Per-step NDJSON log output path.
    #[arg(long)]
    log: PathBuf,
    /// Camera path: `orbit:RADIUS,HEIGHT,PERIOD` or a trajectory JSON file.
    #[arg(long, default_value = "orbit:4,0.8,4")]
    trajectory: String,
    /// Resume from this checkpoint; --config must match its embedded config.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    /// Checkpoint to render from (exactly one of --ckpt / --scene).
    #[arg(long, conflicts_with = "scene")]
    ckpt: Option<PathBuf>,
    /// Toy scene to render instead: ground-truth frames for comparison.
    #[arg(long)]
    scene: Option<String>,
    /// Camera path: `orbit:RADIUS,HEIGHT,PERIOD` or a trajectory JSON file.
    #[arg(long)]
    poses: String,
    /// Output directory, created if missing; frames are frame_NNN.<format>.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    /// Square output resolution in pixels.
    #[arg(long, default_value_t = 64)]
    res: u32,
    /// png (8-bit) or ppm (16-bit).
    #[arg(long, default_value = "png")]
    format: String,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of rendered frames (png/ppm).
    #[arg(long)]
    rendered: PathBuf,
    /// Directory of reference frames with the same file names.
    #[arg(long)]
    target: PathBuf,
    /// Display gamma applied to both sides before scoring.
    #[arg(long, default_value_t = 2.2)]
    gamma: f64,
    /// Output report JSON.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct DiagArgs {
    /// Training NDJSON log.
    #[arg(long)]
    log: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

/// Why a command failed, which picks the exit code: rejected input (2) or a
/// failure while running (3).
#[derive(Debug)]
enum Failure {
    Validation(String),
    Runtime(String),
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(msg.into())
}

fn runtime(err: impl ToString) -> Failure {
    Failure::Runtime(err.to_string())
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Train(args) => train(args),
        Command::Render(args) => render(args),
        Command::Eval(args) => eval(args),
        Command::Diag(args) => diag(args),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            EXIT_VALIDATION
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
    }
}

/// Applies `SAENERF_THREADS` before any parallel work; unset keeps rayon's
/// default (one worker per core).
fn init_threads() -> Result<(), Failure> {
    let Some(raw) = env::var_os("SAENERF_THREADS") else {
        return Ok(());
    };
    let raw = raw.to_string_lossy();
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| invalid(format!("SAENERF_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| runtime(format!("thread pool: {e}")))
}

fn parse_pattern(s: &str) -> Result<BayerPattern, Failure> {
    match s {
        "RGGB" => Ok(BayerPattern::Rggb),
        "mono" => Ok(BayerPattern::Mono),
        other => Err(invalid(format!("unknown pattern {other:?} (expected RGGB or mono)"))),
    }
}

/// A camera path given on the command line: inline `orbit:R,H,P` (target at
/// the origin), or a JSON file holding either an orbit object or an array of
/// keyframes.
enum CameraPath {
    Orbit(OrbitTrajectory),
    Keyframes(KeyframeTrajectory),
}

impl CameraPath {
    fn parse(spec: &str) -> Result<CameraPath, Failure> {
        if let Some(rest) = spec.strip_prefix("orbit:") {
            let parts: Vec<&str> = rest.split(',').collect();
            if parts.len() != 3 {
                return Err(invalid(format!(
                    "orbit spec needs radius,height,period — got {spec:?}"
                )));
            }
            let mut nums = [0.0f64; 3];
            for (slot, part) in nums.iter_mut().zip(&parts) {
                *slot = part
                    .trim()
                    .parse()
                    .map_err(|_| invalid(format!("bad number {part:?} in orbit spec")))?;
            }
            let [radius, height, period] = nums;
            if !(radius > 0.0) || !(period > 0.0) || !height.is_finite() {
                return Err(invalid(format!(
                    "orbit spec needs radius > 0 and period > 0 — got {spec:?}"
                )));
            }
            return Ok(CameraPath::Orbit(OrbitTrajectory {
                radius,
                height,
                period,
                target: [0.0; 3],
            }));
        }
        let text = fs::read_to_string(spec)
            .map_err(|e| invalid(format!("trajectory {spec:?}: {e}")))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| invalid(format!("trajectory {spec:?}: {e}")))?;
        if value.is_array() {
            KeyframeTrajectory::from_json(&text)
                .map(CameraPath::Keyframes)
                .map_err(|e| invalid(format!("trajectory {spec:?}: {e}")))
        } else {
            serde_json::from_value::<OrbitTrajectory>(value)
                .map(CameraPath::Orbit)
                .map_err(|e| invalid(format!("trajectory {spec:?}: {e}")))
        }
    }

    fn as_trajectory(&self) -> &dyn Trajectory {
        match self {
            CameraPath::Orbit(o) => o,
            CameraPath::Keyframes(k) => k,
        }
    }

    /// Times for `n` rendered frames: one revolution sampled half-open for an
    /// orbit (frame n would repeat frame 0), the keyframe span inclusive.
    fn render_times(&self, n: usize) -> Vec<f64> {
        match self {
            CameraPath::Orbit(o) => (0..n).map(|i| i as f64 * o.period / n as f64).collect(),
            CameraPath::Keyframes(k) => {
                let (t0, t1) = k.time_span();
                if n == 1 {
                    return vec![t0];
                }
                (0..n).map(|i| t0 + (t1 - t0) * i as f64 / (n - 1) as f64).collect()
            }
        }
    }
}

/// Intrinsics for an existing sensor, matching the field-of-view convention
/// of [`CameraIntrinsics::for_resolution`] on the shorter side.
fn sensor_intrinsics(width: u32, height: u32) -> CameraIntrinsics {
    let f = 0.8 * width.min(height) as f64;
    CameraIntrinsics {
        fx: f,
        fy: f,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        width,
        height,
    }
}

fn simulate(args: SimulateArgs) -> Result<(), Failure> {
    let scene = ToyScene::load(&args.scene).map_err(|e| invalid(format!("scene: {e}")))?;
    if args.frames < 2 {
        return Err(invalid("--frames must be at least 2"));
    }
    if !(args.period > 0.0) || !args.period.is_finite() {
        return Err(invalid("--period must be positive"));
    }
    if !(args.threshold > 0.0) || !args.threshold.is_finite() {
        return Err(invalid("--threshold must be positive"));
    }
    if !(args.noise >= 0.0) || !args.noise.is_finite() {
        return Err(invalid("--noise must be non-negative"));
    }
    if args.res < 2 {
        return Err(invalid("--res must be at least 2"));
    }
    let pattern = parse_pattern(&args.pattern)?;

    let k = CameraIntrinsics::for_resolution(args.res);
    let orbit =
        OrbitTrajectory { radius: 4.0, height: 0.8, period: args.period, target: [0.0; 3] };
    let cfg = RenderConfig { background: scene.background, ..RenderConfig::default() };
    let times = frame_times(args.frames, args.period);
    let frames = sensor_log_frames(&scene, &k, &orbit, &times, &cfg, pattern).map_err(runtime)?;
    let stream =
        simulate_events(args.res, args.res, &frames, args.threshold, pattern, args.noise, args.seed)
            .map_err(runtime)?;
    write_events(&stream, &args.out).map_err(runtime)?;
    println!(
        "{} events over {:.3} s ({}x{} {}, threshold {}) -> {}",
        stream.events.len(),
        stream.duration_us as f64 / 1e6,
        stream.width,
        stream.height,
        stream.pattern,
        stream.threshold,
        args.out.display(),
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let stream = read_events(&args.events)
        .map_err(|e| invalid(format!("events {}: {e}", args.events.display())))?;
    let text = fs::read_to_string(&args.config)
        .map_err(|e| invalid(format!("config {}: {e}", args.config.display())))?;
    let config: TrainConfig = serde_json::from_str(&text)
        .map_err(|e| invalid(format!("config {}: {e}", args.config.display())))?;
    let path = CameraPath::parse(&args.trajectory)?;
    let k = sensor_intrinsics(stream.width, stream.height);

    let mut trainer = match &args.resume {
        Some(ckpt_path) => {
            let mut ckpt = load_checkpoint(ckpt_path)
                .map_err(|e| invalid(format!("checkpoint {}: {e}", ckpt_path.display())))?;
            // The step count may grow (extending a run is exactly what the
            // longer uninterrupted run would have done); everything else must
            // match the embedded config or the result would be incoherent.
            let mut want = config.clone();
            want.iterations = ckpt.config.iterations;
            if want != ckpt.config {
                return Err(invalid(format!(
                    "--config disagrees with the config embedded in {} (only iterations may change on resume)",
                    ckpt_path.display()
                )));
            }
            if (config.iterations as u64) < ckpt.step {
                return Err(invalid(format!(
                    "--config asks for {} iterations but {} is already at step {}",
                    config.iterations,
                    ckpt_path.display(),
                    ckpt.step
                )));
            }
            ckpt.config.iterations = config.iterations;
            Trainer::from_checkpoint(&stream, path.as_trajectory(), k, ckpt)
        }
        None => Trainer::new(&stream, path.as_trajectory(), k, config),
    }
    .map_err(|e| invalid(e.to_string()))?;

    let iterations = trainer.config().iterations as u64;
    let log_file = fs::File::create(&args.log)
        .map_err(|e| runtime(format!("log {}: {e}", args.log.display())))?;
    let mut log = BufWriter::new(log_file);
    let started = Instant::now();
    trainer
        .run_with(&mut log, Some(&args.out), |step, record| {
            if step % PROGRESS_EVERY == 0 || step == iterations {
                match record {
                    Some(r) => eprintln!("step {step}/{iterations} loss {:.6}", r.loss_total),
                    None => eprintln!("step {step}/{iterations} (skipped)"),
                }
            }
        })
        .map_err(train_run_failure)?;
    println!(
        "trained {} steps in {:.1} s -> {} (log {})",
        trainer.completed_steps(),
        started.elapsed().as_secs_f64(),
        args.out.display(),
        args.log.display(),
    );
    Ok(())
}

/// Failures after the trainer is already validated and running.
fn train_run_failure(e: TrainError) -> Failure {
    runtime(format!("training: {e}"))
}

enum RenderSource {
    Field(Box<FieldParams>, RenderConfig),
    Scene(ToyScene, RenderConfig),
}

fn render(args: RenderArgs) -> Result<(), Failure> {
    if args.frames == 0 {
        return Err(invalid("--frames must be at least 1"));
    }
    if args.res < 2 {
        return Err(invalid("--res must be at least 2"));
    }
    let ext = match args.format.as_str() {
        "png" | "ppm" => args.format.as_str(),
        other => return Err(invalid(format!("unknown format {other:?} (expected png or ppm)"))),
    };
    let path = CameraPath::parse(&args.poses)?;

    let source = match (&args.ckpt, &args.scene) {
        (Some(ckpt_path), None) => {
            let ckpt = load_checkpoint(ckpt_path)
                .map_err(|e| invalid(format!("checkpoint {}: {e}", ckpt_path.display())))?;
            RenderSource::Field(Box::new(ckpt.params), ckpt.config.render)
        }
        (None, Some(spec)) => {
            let scene = ToyScene::load(spec).map_err(|e| invalid(format!("scene: {e}")))?;
            let cfg = RenderConfig { background: scene.background, ..RenderConfig::default() };
            RenderSource::Scene(scene, cfg)
        }
        _ => return Err(invalid("pass exactly one of --ckpt or --scene")),
    };

    fs::create_dir_all(&args.out)
        .map_err(|e| runtime(format!("output dir {}: {e}", args.out.display())))?;
    let k = CameraIntrinsics::for_resolution(args.res);
    let times = path.render_times(args.frames);
    for (i, &t) in times.iter().enumerate() {
        let pose = path.as_trajectory().pose_at(t).map_err(runtime)?;
        let image = match &source {
            RenderSource::Field(params, cfg) => render_image(params.as_ref(), &k, &pose, cfg),
            RenderSource::Scene(scene, cfg) => render_ground_truth(scene, &k, &pose, cfg),
        };
        let file = args.out.join(format!("frame_{i:03}.{ext}"));
        match ext {
            "png" => image.save_png8(&file),
            _ => image.save_ppm16(&file),
        }
        .map_err(|e| runtime(format!("{}: {e}", file.display())))?;
    }
    println!("wrote {} frames to {}", times.len(), args.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), Failure> {
    if !(args.gamma > 0.0) || !args.gamma.is_finite() {
        return Err(invalid("--gamma must be positive"));
    }
    let rendered = list_images(&args.rendered)?;
    if rendered.is_empty() {
        return Err(invalid(format!("no png/ppm images in {}", args.rendered.display())));
    }
    let target = list_images(&args.target)?;
    let missing: Vec<&String> = rendered.keys().filter(|k| !target.contains_key(*k)).collect();
    if !missing.is_empty() {
        return Err(invalid(format!(
            "target dir lacks {} of the rendered names (first missing: {})",
            missing.len(),
            missing[0]
        )));
    }

    let mut loaded = Vec::with_capacity(rendered.len());
    for (name, path) in &rendered {
        let r = Image::load(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let t = Image::load(&target[name])
            .map_err(|e| invalid(format!("{}: {e}", target[name].display())))?;
        loaded.push((name.clone(), r, t));
    }
    let pairs: Vec<(String, &Image, &Image)> =
        loaded.iter().map(|(n, r, t)| (n.clone(), r, t)).collect();
    let rep = report(&pairs, args.gamma).map_err(|e| invalid(format!("eval: {e}")))?;
    let json = serde_json::to_string_pretty(&rep).map_err(runtime)?;
    fs::write(&args.report, json)
        .map_err(|e| runtime(format!("report {}: {e}", args.report.display())))?;
    println!(
        "{} image pairs: mean PSNR {:.3} dB, mean SSIM {:.4} -> {}",
        rep.images.len(),
        rep.mean_psnr,
        rep.mean_ssim,
        args.report.display(),
    );
    Ok(())
}

/// Maps file name -> path for every png/ppm directly inside `dir`.
fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>, Failure> {
    let entries =
        fs::read_dir(dir).map_err(|e| invalid(format!("{}: {e}", dir.display())))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
        let path = entry.path();
        let is_image =
            matches!(path.extension().and_then(|e| e.to_str()), Some("png") | Some("ppm"));
        if is_image && path.is_file() {
            out.insert(entry.file_name().to_string_lossy().into_owned(), path);
        }
    }
    Ok(out)
}

fn diag(args: DiagArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&args.log)
        .map_err(|e| invalid(format!("log {}: {e}", args.log.display())))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: StepRecord = serde_json::from_str(line)
            .map_err(|e| invalid(format!("{}:{}: {e}", args.log.display(), lineno + 1)))?;
        rows.push(record);
    }
    let mut csv = String::from(
        "step,loss_total,loss_norm,loss_zero_plus,loss_zero_minus,taopet_mean,poap,poap_pos,n_pos,n_neg,n_consistent\n",
    );
    for r in &rows {
        let zero_plus = r.loss_zero_plus.map(|v| v.to_string()).unwrap_or_default();
        let taopet = r.taopet_mean.map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.step,
            r.loss_total,
            r.loss_norm,
            zero_plus,
            r.loss_zero_minus,
            taopet,
            r.poap,
            r.poap_pos,
            r.n_pos,
            r.n_neg,
            r.n_consistent,
        ));
    }
    fs::write(&args.out, csv).map_err(|e| runtime(format!("{}: {e}", args.out.display())))?;
    println!("{} rows -> {}", rows.len(), args.out.display());
    Ok(())
}
