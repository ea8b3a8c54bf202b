//! Acceptance gate: eight numbered end-to-end claims, one verdict line each.
//!
//! Run with `cargo test --test acceptance -- --nocapture --test-threads=1`
//! to see every verdict in order. Each test prints exactly one line of the
//! form `ACCEPTANCE <n> (<name>): PASS|FAIL — <detail>` and then asserts it,
//! so a failing criterion is both visible and red.
//!
//! The heavyweight fixtures (a 240-frame simulated orbit at 64x64 and the
//! eight-way training grid) are shared between tests through lazy statics,
//! so the suite costs one simulation and one grid no matter the test order.
//! Expect roughly 20-30 minutes end to end on a single desktop core; the
//! per-criterion budgets quoted in the verdict details are the binding ones.

use std::sync::LazyLock;
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use saenerf::events::{
    accumulate, bayer_channel, simulate_events, write_events, read_events, BayerPattern, Event,
    EventStream, LogFrame,
};
use saenerf::field::{ArchConfig, FieldParams};
use saenerf::geometry::{CameraIntrinsics, OrbitTrajectory, Ray, Trajectory};
use saenerf::grad::Tape;
use saenerf::losses::{
    composite_loss, loss_norm, loss_norm_minus, loss_norm_plus, loss_zero_minus, loss_zero_plus,
    poap, sample_window_batch, taopet, InnerNorm, LossConfig, NormVariant,
};
use saenerf::renderer::{
    render_delta_log, render_image, volume_render, Image, RaySamples, RenderConfig,
};
use saenerf::scene::{frame_times, render_ground_truth, sensor_log_frames, ToyScene};
use saenerf::trainer::{
    draw_window, load_checkpoint, save_checkpoint, Trainer, TrainConfig,
};

// ---------------------------------------------------------------------------
// Shared protocol constants (frozen; changing them invalidates the verdicts).
// ---------------------------------------------------------------------------

/// Orbit period of every fixture trajectory, seconds.
const PERIOD: f64 = 4.0;
/// Contrast threshold all fixtures are simulated with.
const THRESHOLD: f64 = 0.25;
/// Frames per simulated orbit: dense enough that consecutive-frame log steps
/// stay well under one threshold almost everywhere.
const FRAMES: usize = 240;
/// Simulation seed shared by every fixture stream.
const SIM_SEED: u64 = 1;

/// Criterion 5 floor, dB. Calibrated from one frozen reference run of the
/// protocol below (mean PSNR 25.72 dB over the 8 held-out views) minus a
/// regression margin; deliberately above the 20 dB product floor.
const C5_MIN_PSNR: f64 = 22.0;
/// The product-level floor criterion 5 must also clear.
const C5_FLOOR_PSNR: f64 = 20.0;

/// Criterion 6 product floor: quiet-background artifact mass must shrink at
/// least this factor when the relative quiet-pixel penalty is enabled.
const C6_MIN_FACTOR: f64 = 2.0;
/// Frozen regression bound for the same factor, calibrated from one frozen
/// reference run of the grid protocol (measured 15.25x); kept well below
/// the reference so only a real regression trips it.
const C6_FROZEN_FACTOR: f64 = 3.0;

/// Criterion 7 tie tolerance: two grid rows count as tied when the larger
/// background measure is within 10% of the smaller. The training grid is
/// fully deterministic, so ties only matter for genuine near-equality.
const C7_TIE_FACTOR: f64 = 1.10;

fn orbit() -> OrbitTrajectory {
    OrbitTrajectory { radius: 4.0, height: 0.8, period: PERIOD, target: [0.0; 3] }
}

fn verdict(number: u8, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {number} ({name}): {status} — {detail}");
    assert!(pass, "acceptance criterion {number} ({name}) failed: {detail}");
}

// ---------------------------------------------------------------------------
// Shared fixtures.
// ---------------------------------------------------------------------------

/// Per-pixel log-intensity frames of one 64x64 orbit — the sensor's ground
/// truth signal, shared by the clean and noisy streams below.
static LOGS64: LazyLock<Vec<LogFrame>> = LazyLock::new(|| {
    let scene = ToyScene::two_blobs();
    let k = CameraIntrinsics::for_resolution(64);
    let cfg = RenderConfig { background: scene.background, ..RenderConfig::default() };
    let times = frame_times(FRAMES, PERIOD);
    sensor_log_frames(&scene, &k, &orbit(), &times, &cfg, BayerPattern::Rggb)
        .expect("orbit poses are always defined")
});

/// Noise-free 64x64 stream (criteria 4 and 5).
static CLEAN64: LazyLock<EventStream> = LazyLock::new(|| {
    simulate_events(64, 64, &LOGS64, THRESHOLD, BayerPattern::Rggb, 0.0, SIM_SEED)
        .expect("valid simulation inputs")
});

/// Same orbit with 20% spurious events (criteria 6 and 7).
static NOISY64: LazyLock<EventStream> = LazyLock::new(|| {
    simulate_events(64, 64, &LOGS64, THRESHOLD, BayerPattern::Rggb, 0.2, SIM_SEED)
        .expect("valid simulation inputs")
});

/// Small noisy stream for cheap operating-point draws (criterion 1).
static NOISY32: LazyLock<EventStream> = LazyLock::new(|| {
    let scene = ToyScene::two_blobs();
    let k = CameraIntrinsics::for_resolution(32);
    let cfg = RenderConfig { background: scene.background, ..RenderConfig::default() };
    let times = frame_times(120, PERIOD);
    let logs = sensor_log_frames(&scene, &k, &orbit(), &times, &cfg, BayerPattern::Rggb)
        .expect("orbit poses are always defined");
    simulate_events(32, 32, &logs, THRESHOLD, BayerPattern::Rggb, 0.2, SIM_SEED)
        .expect("valid simulation inputs")
});

/// The reference training protocol: every knob of the frozen criterion-5
/// reference run. Criteria 6 and 7 reuse it with other loss settings and
/// step counts.
fn reference_train_config(loss: LossConfig, iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        learning_rate: 1e-3,
        batch_size: 64,
        windows_per_step: 4,
        l_max: Some(0.8),
        l_min: 0.05,
        seed: 5,
        checkpoint_interval: 0,
        loss,
        render: RenderConfig {
            near: 2.0,
            far: 6.0,
            n_samples: 16,
            eps_log: 0.01,
            background: [0.5, 0.5, 0.5],
        },
        arch: ArchConfig {
            width: 32,
            depth: 2,
            n_freq_pos: 5,
            n_freq_dir: 1,
            position_scale: 0.25,
        },
    }
}

fn train_on(stream: &EventStream, config: TrainConfig) -> FieldParams {
    let k = CameraIntrinsics::for_resolution(stream.width);
    let traj = orbit();
    let mut trainer = Trainer::new(stream, &traj, k, config).expect("valid reference config");
    trainer.run(&mut std::io::sink(), None).expect("reference training must not abort");
    trainer.params().clone()
}

/// The eight loss settings of the comparison grid: the three normalizer
/// scopes with and without the relative quiet-pixel term, the absolute
/// quiet-pixel variants, and the L2 inner norm.
fn combo_grid() -> Vec<(&'static str, LossConfig)> {
    let base = LossConfig { lambda: 0.0, ..LossConfig::default() };
    vec![
        ("norm+&zero+", LossConfig { variant: NormVariant::NormPlus, lambda: 0.5, ..base }),
        ("norm-&zero+", LossConfig { variant: NormVariant::NormMinus, lambda: 0.5, ..base }),
        ("norm&zero+", LossConfig { variant: NormVariant::Norm, lambda: 0.5, ..base }),
        (
            "L2 norm+&zero+",
            LossConfig {
                variant: NormVariant::NormPlus,
                inner_norm: InnerNorm::L2,
                lambda: 0.5,
                ..base
            },
        ),
        ("norm+&zero-", LossConfig { variant: NormVariant::NormPlus, lambda0: 0.5, ..base }),
        (
            "norm+&zero",
            LossConfig { variant: NormVariant::NormPlus, lambda: 0.5, lambda0: 0.5, ..base },
        ),
        ("norm+", LossConfig { variant: NormVariant::NormPlus, ..base }),
        ("norm-", LossConfig { variant: NormVariant::NormMinus, ..base }),
    ]
}

/// Held-out evaluation windows, disjoint from no training window by
/// construction but never drawn verbatim by the sampler: fixed 0.3 s spans.
fn held_out_windows() -> Vec<(u64, u64)> {
    [0.2f64, 0.8, 1.4, 2.0, 2.6, 3.2]
        .iter()
        .map(|&t0| ((t0 * 1e6) as u64, ((t0 + 0.3) * 1e6) as u64))
        .collect()
}

/// Mean |predicted delta-log| over pixels that render as pure background in
/// the analytic scene at both window poses *and* saw zero events in the
/// window — the artifact mass a converged model should not put there.
fn background_quiet_mean_abs_dl(
    params: &FieldParams,
    stream: &EventStream,
    cfg: &RenderConfig,
    windows: &[(u64, u64)],
) -> f64 {
    let scene = ToyScene::two_blobs();
    let k = CameraIntrinsics::for_resolution(stream.width);
    let traj = orbit();
    let gt_cfg = RenderConfig { background: scene.background, ..RenderConfig::default() };
    let samples = RaySamples::midpoint(cfg.near, cfg.far, cfg.n_samples);
    let mut total = 0.0;
    let mut count = 0usize;
    for &(t0_us, t_us) in windows {
        let p0 = traj.pose_at(t0_us as f64 / 1e6).expect("time within orbit");
        let p1 = traj.pose_at(t_us as f64 / 1e6).expect("time within orbit");
        let g0 = render_ground_truth(&scene, &k, &p0, &gt_cfg);
        let g1 = render_ground_truth(&scene, &k, &p1, &gt_cfg);
        let map = accumulate(stream, t0_us, t_us, None).expect("window within duration");
        for y in 0..stream.height {
            for x in 0..stream.width {
                // Rays that miss every primitive composite to the background
                // constant bitwise, so exact equality is a sound mask.
                let bg = (0..3).all(|c| {
                    g0.get(x, y)[c] == scene.background[c] && g1.get(x, y)[c] == scene.background[c]
                });
                if !bg || map.get(x as u16, y as u16) != 0 {
                    continue;
                }
                let ch = bayer_channel(x, y, stream.pattern);
                let dl = render_delta_log(
                    params,
                    &k,
                    &p0,
                    &p1,
                    (x, y),
                    ch,
                    &samples,
                    cfg.background,
                    cfg.eps_log,
                )
                .expect("pixel within sensor");
                total += dl.abs();
                count += 1;
            }
        }
    }
    total / count as f64
}

/// One trained row of the comparison grid.
struct GridRun {
    name: &'static str,
    completed: bool,
    abort: String,
    all_finite: bool,
    skipped_steps: usize,
    /// Background artifact mass on the held-out windows (NaN if aborted).
    metric: f64,
    /// Mean held-out-view PSNR (NaN if aborted) — the reconstruction-quality
    /// side of the same grid, reported for context.
    psnr: f64,
}

/// Mean aligned, gamma-corrected PSNR over the 8 held-out orbit views.
fn held_out_psnr(params: &FieldParams, render_cfg: &RenderConfig) -> f64 {
    let scene = ToyScene::two_blobs();
    let k = CameraIntrinsics::for_resolution(64);
    let traj = orbit();
    let gt_cfg = RenderConfig { background: scene.background, ..RenderConfig::default() };
    let mut pairs_owned: Vec<(String, Image, Image)> = Vec::new();
    for i in 0..8 {
        let t = i as f64 * PERIOD / 8.0;
        let pose = traj.pose_at(t).expect("time within orbit");
        let rendered = render_image(params, &k, &pose, render_cfg);
        let target = render_ground_truth(&scene, &k, &pose, &gt_cfg);
        pairs_owned.push((format!("view_{i}"), rendered, target));
    }
    let pairs: Vec<(String, &Image, &Image)> =
        pairs_owned.iter().map(|(n, r, t)| (n.clone(), r, t)).collect();
    saenerf::eval::report(&pairs, 2.2).expect("non-empty pair list").mean_psnr
}

/// Criterion 7's training grid (criterion 6 reads two of its rows): each
/// combo trained 500 steps on the noisy stream under the reference protocol.
static GRID: LazyLock<Vec<GridRun>> = LazyLock::new(|| {
    let stream = &*NOISY64;
    let k = CameraIntrinsics::for_resolution(stream.width);
    let traj = orbit();
    let windows = held_out_windows();
    combo_grid()
        .into_iter()
        .map(|(name, loss)| {
            let config = reference_train_config(loss, 500);
            let render = config.render;
            let mut trainer =
                Trainer::new(stream, &traj, k, config).expect("valid reference config");
            let mut skipped_steps = 0usize;
            let mut all_finite = true;
            let result = trainer.run_with(&mut std::io::sink(), None, |_, record| match record {
                None => skipped_steps += 1,
                Some(r) => {
                    let finite = r.loss_total.is_finite()
                        && r.loss_norm.is_finite()
                        && r.loss_zero_plus.is_none_or(f64::is_finite)
                        && r.loss_zero_minus.is_finite()
                        && r.poap.is_finite();
                    if !finite {
                        all_finite = false;
                    }
                }
            });
            let completed = result.is_ok();
            let abort = result.err().map(|e| e.to_string()).unwrap_or_default();
            let (metric, psnr) = if completed {
                (
                    background_quiet_mean_abs_dl(trainer.params(), stream, &render, &windows),
                    held_out_psnr(trainer.params(), &render),
                )
            } else {
                (f64::NAN, f64::NAN)
            };
            GridRun { name, completed, abort, all_finite, skipped_steps, metric, psnr }
        })
        .collect()
});

// ---------------------------------------------------------------------------
// Criterion 1 — composite-loss gradients match central finite differences.
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_gradient_fidelity() {
    let start = Instant::now();
    let stream = &*NOISY32;
    let k = CameraIntrinsics::for_resolution(stream.width);
    let traj = orbit();
    let render_cfg = RenderConfig {
        near: 2.0,
        far: 6.0,
        n_samples: 8,
        eps_log: 0.01,
        background: [0.5, 0.5, 0.5],
    };
    let arch =
        ArchConfig { width: 16, depth: 2, n_freq_pos: 4, n_freq_dir: 1, position_scale: 0.25 };
    let combos = combo_grid();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC1);
    let h = 1e-4;

    let mut rel_errors: Vec<f64> = Vec::new();
    let mut kink_skipped = 0usize;
    let mut draws = 0usize;
    while draws < 100 {
        // A fresh random parameter vector and window per draw; the loss
        // settings cycle through the whole family.
        let params = FieldParams::init(arch, rng.random());
        let (t0, t) = draw_window(stream.duration_us, 800_000, 50_000, &mut rng);
        let Ok(batch) = sample_window_batch(
            stream,
            &traj,
            &params,
            &k,
            t0,
            t,
            48,
            0.25,
            &mut rng,
            &render_cfg,
        ) else {
            continue; // window with no firing pixels: redraw
        };
        let e = batch.polarities();
        let cfg = combos[draws % combos.len()].1;

        let tape = Tape::new();
        let leaves = tape.leaves(&batch.delta_log);
        let Ok(out) = composite_loss(&leaves, &e, &cfg) else {
            continue; // degenerate normalizer at this operating point: redraw
        };
        let grads = tape.backward(out.total).expect("loss depends on its inputs");

        let eval = |x: &[f64]| -> Option<f64> {
            let t2 = Tape::new();
            let l2 = t2.leaves(x);
            composite_loss(&l2, &e, &cfg).ok().map(|c| c.total.value())
        };
        let mut x = batch.delta_log.clone();
        for i in 0..x.len() {
            // |.| kinks sit at zero crossings and sign flips switch the
            // consistency masks; inside the stencil either makes the
            // finite-difference reference itself meaningless.
            if x[i].abs() <= 2.0 * h {
                kink_skipped += 1;
                continue;
            }
            let orig = x[i];
            x[i] = orig + h;
            let fp = eval(&x);
            x[i] = orig - h;
            let fm = eval(&x);
            x[i] = orig;
            let (Some(fp), Some(fm)) = (fp, fm) else {
                kink_skipped += 1;
                continue;
            };
            let fd = (fp - fm) / (2.0 * h);
            let ad = grads.of(leaves[i]);
            rel_errors.push((ad - fd).abs() / fd.abs().max(1.0));
        }
        draws += 1;
    }

    rel_errors.sort_unstable_by(f64::total_cmp);
    let n = rel_errors.len();
    let max_rel = rel_errors.last().copied().unwrap_or(f64::NAN);
    let within = rel_errors.iter().filter(|&&r| r <= 1e-3).count();
    let frac = within as f64 / n as f64;
    let elapsed = start.elapsed().as_secs_f64();

    let pass = n > 3000 && frac >= 0.99 && max_rel <= 1e-2 && elapsed <= 120.0;
    verdict(
        1,
        "gradient fidelity",
        pass,
        &format!(
            "{n} coordinates over 100 draws: {:.3}% within 1e-3 (need >=99%), max rel err \
             {max_rel:.2e} (cap 1e-2), {kink_skipped} kink-adjacent coordinates excluded, \
             {elapsed:.1}s (budget 120s)",
            frac * 100.0
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2 — ray weights plus leftover transmittance sum to one.
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_ray_weights_partition_unity() {
    let scene = ToyScene::two_blobs();
    let arch =
        ArchConfig { width: 16, depth: 2, n_freq_pos: 4, n_freq_dir: 1, position_scale: 0.25 };
    let params = FieldParams::init(arch, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC2);
    let bg = [0.5, 0.5, 0.5];

    let mut worst = 0.0f64;
    let mut negative_weights = 0usize;
    for i in 0..10_000 {
        let s = [4usize, 16, 64][i % 3];
        let samples = RaySamples::stratified(2.0, 6.0, s, &mut rng);
        let origin = Vector3::new(
            rng.random_range(-4.0..4.0),
            rng.random_range(-4.0..4.0),
            rng.random_range(-4.0..4.0),
        );
        let direction = loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 {
                break v / n;
            }
        };
        let ray = Ray { origin, direction };
        let px = if i % 2 == 0 {
            volume_render(&scene, &ray, &samples, bg)
        } else {
            volume_render(&params, &ray, &samples, bg)
        };
        let total: f64 = px.weights.iter().sum::<f64>() + px.background_weight;
        worst = worst.max((total - 1.0).abs());
        negative_weights += px.weights.iter().filter(|&&w| w < 0.0).count();
    }

    let pass = worst <= 1e-6 && negative_weights == 0;
    verdict(
        2,
        "ray weight partition of unity",
        pass,
        &format!(
            "10000 random rays (4/16/64 samples, analytic + random fields): worst |sum-1| = \
             {worst:.2e} (cap 1e-6), {negative_weights} negative weights"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3 — loss algebra: scale invariance, zero at truth, worked values.
// ---------------------------------------------------------------------------

/// Evaluates one loss on plain values through a fresh tape.
fn loss_value(
    which: &str,
    dl: &[f64],
    e: &[i64],
    cfg: &LossConfig,
) -> Option<f64> {
    let tape = Tape::new();
    let leaves = tape.leaves(dl);
    match which {
        "norm" => loss_norm(&leaves, e, cfg).ok().map(|v| v.value()),
        "norm-" => loss_norm_minus(&leaves, e, cfg).ok().map(|v| v.value()),
        "norm+" => loss_norm_plus(&leaves, e, cfg).ok().map(|v| v.value.value()),
        "zero+" => loss_zero_plus(&leaves, e, cfg.eps_div).ok().map(|v| v.value()),
        "zero-" => Some(loss_zero_minus(&leaves, e).value()),
        "composite" => composite_loss(&leaves, e, cfg).ok().map(|c| c.total.value()),
        _ => unreachable!(),
    }
}

#[test]
fn criterion_3_loss_algebra() {
    let cfg = LossConfig::default();
    let mut detail = String::new();
    let mut pass = true;

    // (a) positive-scale invariance. The batch carries enough firing mass
    // that the divide guard's bias stays far below the tolerance, and one
    // sign-inconsistent pixel so the three normalizer scopes all differ.
    let dl = [1.2, -0.9, 0.8, 1.1, -0.6, 0.45, 0.02, -0.015, 0.01];
    let e = [2i64, -1, 1, 1, 1, 1, 0, 0, 0];
    let mut worst_scale = 0.0f64;
    for which in ["norm", "norm-", "norm+", "zero+"] {
        let base = loss_value(which, &dl, &e, &cfg).expect("well-posed batch");
        for k in [0.1, 1.0, 3.0] {
            let scaled: Vec<f64> = dl.iter().map(|v| v * k).collect();
            let at_k = loss_value(which, &scaled, &e, &cfg).expect("well-posed batch");
            worst_scale = worst_scale.max((at_k - base).abs());
        }
    }
    pass &= worst_scale <= 1e-9;
    detail.push_str(&format!("scale drift {worst_scale:.2e} (cap 1e-9)"));

    // (b) zero at truth: predictions exactly threshold*polarity.
    let e2 = [2i64, -1, 1, 0, 3, -2, 0];
    let dl2: Vec<f64> = e2.iter().map(|&p| THRESHOLD * p as f64).collect();
    let mut worst_truth = 0.0f64;
    for which in ["norm", "norm-", "norm+", "zero+", "zero-", "composite"] {
        let v = loss_value(which, &dl2, &e2, &cfg).expect("well-posed batch");
        worst_truth = worst_truth.max(v.abs());
    }
    let implied = taopet(&dl2, &e2).expect("batch fires");
    let stats = poap(&dl2, &e2);
    pass &= worst_truth <= 1e-12;
    pass &= (implied.mean - THRESHOLD).abs() <= 1e-12;
    pass &= stats.poap_pos == 1.0;
    detail.push_str(&format!(
        "; at truth: worst loss {worst_truth:.1e} (cap 1e-12), implied threshold {:.3} (want {THRESHOLD}), firing-pixel consistency {:.1}",
        implied.mean, stats.poap_pos
    ));

    // (c) the three frozen worked examples, as exact fractions: 1/16, 1/4
    // (= 27/108), and 37/48. Confirmed by hand-checked fraction arithmetic
    // independent of this implementation.
    let norm_val = loss_value("norm", &[0.3, 0.1], &[1, 1], &cfg).unwrap();
    let batch = [0.2, -0.1, 0.05];
    let pol = [1i64, 1, 0];
    let minus_val = loss_value("norm-", &batch, &pol, &cfg).unwrap();
    let plus_val = loss_value("norm+", &batch, &pol, &cfg).unwrap();
    let worked = [
        ("norm", norm_val, 1.0 / 16.0),
        ("norm-", minus_val, 0.25),
        ("norm+", plus_val, 37.0 / 48.0),
    ];
    let mut worst_worked = 0.0f64;
    for (_, got, want) in worked {
        worst_worked = worst_worked.max((got - want).abs());
    }
    pass &= worst_worked <= 1e-9;
    detail.push_str(&format!(
        "; worked examples (1/16, 1/4, 37/48): worst |err| {worst_worked:.2e} (cap 1e-9)"
    ));

    // Composite on the same batch: the norm+ value plus half the quiet/firing
    // ratio. The divide guard shifts it a few 1e-9, hence the looser cap.
    let comp = loss_value("composite", &batch, &pol, &cfg).unwrap();
    pass &= (comp - 41.0 / 48.0).abs() <= 1e-7;
    detail.push_str(&format!("; composite {comp:.9} (want 41/48 within 1e-7)"));

    verdict(3, "loss algebra", pass, &detail);
}

// ---------------------------------------------------------------------------
// Criterion 4 — event counts track true log changes within one threshold.
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_event_count_bound_and_additivity() {
    let start = Instant::now();
    let stream = &*CLEAN64;
    let logs = &*LOGS64;

    // Per-pixel bound over every prefix window [0, t_k): count*threshold
    // never strays a full threshold from the true log change since the first
    // frame. The orbit closes on itself, so the full-duration case alone
    // would be trivially zero; the prefixes are where the bound has teeth.
    let first = &logs.first().unwrap().values;
    let mut worst_residual = 0.0f64;
    let mut violations = 0usize;
    let mut checked_frames = 0usize;
    for k in (1..logs.len()).step_by(7).chain([logs.len() - 1]) {
        let frame = &logs[k];
        let upto = accumulate(stream, 0, frame.t_us, None).expect("prefix window");
        checked_frames += 1;
        for y in 0..stream.height as usize {
            for x in 0..stream.width as usize {
                let idx = y * stream.width as usize + x;
                let true_dl = frame.values[idx] - first[idx];
                let est = upto.get(x as u16, y as u16) as f64 * THRESHOLD;
                let residual = (est - true_dl).abs();
                worst_residual = worst_residual.max(residual);
                if residual >= THRESHOLD {
                    violations += 1;
                }
            }
        }
    }

    // Window additivity: counts over [t0,t1) and [t1,t2) sum to [t0,t2)
    // exactly, for random splits.
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC4);
    let mut additive = true;
    for _ in 0..20 {
        let mut cuts = [
            rng.random_range(0..stream.duration_us),
            rng.random_range(0..stream.duration_us),
            rng.random_range(1..=stream.duration_us),
        ];
        cuts.sort_unstable();
        let [t0, t1, t2] = cuts;
        if t0 == t1 || t1 == t2 {
            continue;
        }
        let a = accumulate(stream, t0, t1, None).expect("valid window");
        let b = accumulate(stream, t1, t2, None).expect("valid window");
        let c = accumulate(stream, t0, t2, None).expect("valid window");
        for y in 0..stream.height as u16 {
            for x in 0..stream.width as u16 {
                if a.get(x, y) + b.get(x, y) != c.get(x, y) {
                    additive = false;
                }
            }
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    let pass = violations == 0 && additive && elapsed <= 60.0;
    verdict(
        4,
        "event count bound",
        pass,
        &format!(
            "residual |count*C - true dlog| worst {worst_residual:.8} (strict cap {THRESHOLD}) \
             over {} pixels x {checked_frames} prefix windows, {violations} violations; \
             20 random window splits additive: {additive}; {elapsed:.1}s (budget 60s)",
            stream.width * stream.height
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 5 — end-to-end reconstruction from noise-free events.
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_end_to_end_reconstruction() {
    let start = Instant::now();
    let stream = &*CLEAN64;
    let config = reference_train_config(LossConfig::default(), 2000);
    let render_cfg = config.render;
    let params = train_on(stream, config);

    // Eight held-out views around the orbit; the trained field renders with
    // its own training sampler settings, the reference with the dense one.
    let scene = ToyScene::two_blobs();
    let k = CameraIntrinsics::for_resolution(64);
    let traj = orbit();
    let gt_cfg = RenderConfig { background: scene.background, ..RenderConfig::default() };
    let mut pairs_owned: Vec<(String, Image, Image)> = Vec::new();
    for i in 0..8 {
        let t = i as f64 * PERIOD / 8.0;
        let pose = traj.pose_at(t).expect("time within orbit");
        let rendered = render_image(&params, &k, &pose, &render_cfg);
        let target = render_ground_truth(&scene, &k, &pose, &gt_cfg);
        pairs_owned.push((format!("view_{i}"), rendered, target));
    }
    let pairs: Vec<(String, &Image, &Image)> =
        pairs_owned.iter().map(|(n, r, t)| (n.clone(), r, t)).collect();
    let rep = saenerf::eval::report(&pairs, 2.2).expect("non-empty pair list");

    let elapsed = start.elapsed().as_secs_f64();
    let pass = rep.mean_psnr >= C5_MIN_PSNR;
    verdict(
        5,
        "end-to-end reconstruction",
        pass,
        &format!(
            "mean PSNR {:.2} dB / SSIM {:.4} over 8 held-out views after 2000 steps \
             (frozen floor {C5_MIN_PSNR} dB, product floor {C5_FLOOR_PSNR} dB; \
             reference run 25.72 dB); {:.0}s (budget 1800s)",
            rep.mean_psnr, rep.mean_ssim, elapsed
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 6 — the relative quiet-pixel penalty suppresses artifacts.
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_artifact_suppression_factor() {
    let grid = &*GRID;
    let with = grid.iter().find(|r| r.name == "norm+&zero+").expect("grid row");
    let without = grid.iter().find(|r| r.name == "norm+").expect("grid row");
    let factor = without.metric / with.metric;

    let pass = with.completed
        && without.completed
        && factor >= C6_MIN_FACTOR
        && factor >= C6_FROZEN_FACTOR;
    verdict(
        6,
        "artifact suppression",
        pass,
        &format!(
            "noisy stream, identical seeds: quiet-background |dlog| {:.5} with the relative \
             quiet penalty vs {:.5} without — {factor:.2}x smaller (product floor \
             {C6_MIN_FACTOR}x, frozen regression bound {C6_FROZEN_FACTOR}x, reference \
             measurement 15.25x)",
            with.metric, without.metric
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 7 — the full loss grid trains stably; the default wins.
// ---------------------------------------------------------------------------

/// The stability half of this criterion holds; the ordering half is
/// structurally unattainable as stated and is asserted anyway, honestly red.
/// Combos that include the absolute quiet-pixel penalty minimize the
/// quiet-background measure *by construction* — it is (a scaling of) their
/// own training objective — so they always undercut the default on it, even
/// while over-suppressing real signal. The held-out PSNR printed alongside
/// shows the quality ordering, where the relative-penalty rows win and the
/// absolute-penalty rows fall behind.
#[test]
fn criterion_7_loss_grid_stability_and_ordering() {
    let grid = &*GRID;
    let mut detail = String::new();
    let mut all_ok = true;
    for run in grid.iter() {
        if !(run.completed && run.all_finite) {
            all_ok = false;
            detail.push_str(&format!("; {} aborted: {}", run.name, run.abort));
        }
    }
    let skipped: usize = grid.iter().map(|r| r.skipped_steps).sum();

    let best = grid
        .iter()
        .filter(|r| r.metric.is_finite())
        .min_by(|a, b| a.metric.total_cmp(&b.metric))
        .expect("at least one finite row");
    let flagship = grid.iter().find(|r| r.name == "norm+&zero+").expect("grid row");

    let artifact_ranking: Vec<String> = {
        let mut rows: Vec<&GridRun> = grid.iter().collect();
        rows.sort_by(|a, b| a.metric.total_cmp(&b.metric));
        rows.iter().map(|r| format!("{} {:.5}", r.name, r.metric)).collect()
    };
    let psnr_ranking: Vec<String> = {
        let mut rows: Vec<&GridRun> = grid.iter().collect();
        rows.sort_by(|a, b| b.psnr.total_cmp(&a.psnr));
        rows.iter().map(|r| format!("{} {:.2}", r.name, r.psnr)).collect()
    };

    let ordered = flagship.metric <= best.metric * C7_TIE_FACTOR;
    let pass = all_ok && ordered;
    verdict(
        7,
        "loss grid stability and ordering",
        pass,
        &format!(
            "8 combos x 500 steps on the noisy stream: all completed without aborts or \
             non-finite values ({skipped} skipped steps total); quiet-background |dlog| \
             ranking (low to high): [{}]; held-out PSNR ranking (dB, high to low): [{}]; \
             ordering clause: default {:.5} vs best {:.5} ({}, tie factor {C7_TIE_FACTOR}){detail}",
            artifact_ranking.join(", "),
            psnr_ranking.join(", "),
            flagship.metric,
            best.metric,
            if ordered { "lowest or tied" } else { "NOT lowest: rows that train directly on \
             this measure undercut it by construction" }
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 8 — determinism and lossless persistence.
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_determinism_and_persistence() {
    let stream = &*NOISY32;
    let k = CameraIntrinsics::for_resolution(stream.width);
    let traj = orbit();
    let dir = tempfile::tempdir().expect("tempdir");

    let quick_config = |iterations: usize| TrainConfig {
        iterations,
        learning_rate: 1e-3,
        batch_size: 32,
        windows_per_step: 2,
        l_max: Some(0.8),
        l_min: 0.05,
        seed: 5,
        checkpoint_interval: 0,
        loss: LossConfig::default(),
        render: RenderConfig {
            near: 2.0,
            far: 6.0,
            n_samples: 8,
            eps_log: 0.01,
            background: [0.5, 0.5, 0.5],
        },
        arch: ArchConfig {
            width: 16,
            depth: 2,
            n_freq_pos: 4,
            n_freq_dir: 1,
            position_scale: 0.25,
        },
    };

    // (a) two fresh runs of the identical config are bit-identical on disk.
    let run_and_save = |tag: &str| {
        let mut trainer =
            Trainer::new(stream, &traj, k, quick_config(20)).expect("valid config");
        trainer.run(&mut std::io::sink(), None).expect("short run completes");
        let path = dir.path().join(format!("{tag}.ckpt"));
        save_checkpoint(&path, &trainer.checkpoint()).expect("writable tempdir");
        std::fs::read(&path).expect("just written")
    };
    let bytes_a = run_and_save("twin_a");
    let bytes_b = run_and_save("twin_b");
    let twins_identical = bytes_a == bytes_b;

    // (b) stopping after 10 steps and resuming matches the uninterrupted run.
    let resumed_bytes = {
        let mut trainer =
            Trainer::new(stream, &traj, k, quick_config(20)).expect("valid config");
        for _ in 0..10 {
            trainer.step().expect("short run completes");
        }
        let mid = dir.path().join("mid.ckpt");
        save_checkpoint(&mid, &trainer.checkpoint()).expect("writable tempdir");
        let ckpt = load_checkpoint(&mid).expect("just written");
        let mut resumed =
            Trainer::from_checkpoint(stream, &traj, k, ckpt).expect("checkpoint is valid");
        while resumed.completed_steps() < 20 {
            resumed.step().expect("short run completes");
        }
        let path = dir.path().join("resumed.ckpt");
        save_checkpoint(&path, &resumed.checkpoint()).expect("writable tempdir");
        std::fs::read(&path).expect("just written")
    };
    let resume_identical = resumed_bytes == bytes_a;

    // (c) a million random events survive the disk round trip losslessly.
    let round_trip_ok = {
        let mut rng = ChaCha8Rng::seed_from_u64(0xACC8);
        let duration_us = 5_000_000u64;
        let mut times: Vec<u64> =
            (0..1_000_000).map(|_| rng.random_range(0..duration_us)).collect();
        times.sort_unstable();
        let events: Vec<Event> = times
            .into_iter()
            .map(|t| Event {
                t,
                x: rng.random_range(0..640),
                y: rng.random_range(0..480),
                p: if rng.random_bool(0.5) { 1 } else { -1 },
            })
            .collect();
        let original = EventStream::new(
            640,
            480,
            THRESHOLD,
            BayerPattern::Rggb,
            duration_us,
            events,
        )
        .expect("events are in range and sorted");
        let path = dir.path().join("million.saen");
        write_events(&original, &path).expect("writable tempdir");
        let back = read_events(&path).expect("just written");
        back == original
    };

    let pass = twins_identical && resume_identical && round_trip_ok;
    verdict(
        8,
        "determinism and persistence",
        pass,
        &format!(
            "twin 20-step runs bit-identical: {twins_identical}; stop-at-10-resume \
             checkpoint bit-identical to uninterrupted: {resume_identical}; 1e6-event \
             file round trip lossless: {round_trip_ok}"
        ),
    );
}
