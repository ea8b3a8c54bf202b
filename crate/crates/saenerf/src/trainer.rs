//! The optimization loop: window sampling, two-pass gradients, Adam, NDJSON
//! step diagnostics, and bit-exact checkpoint/resume.
//!
//! Each step draws several supervision windows, evaluates the composite loss
//! on each, and averages the surviving windows' parameter gradients. The
//! gradient of one window is assembled in two passes:
//!
//! 1. the plain forward predictions (already in the batch) become leaves of
//!    a small graph holding only the loss arithmetic; one backward sweep
//!    yields the loss sensitivity to every per-pixel prediction;
//! 2. each pixel is re-rendered once on a parameter graph and its backward
//!    sweep is scaled by that sensitivity and accumulated into the dense
//!    parameter gradient.
//!
//! This keeps graph memory proportional to one pixel's render instead of a
//! whole batch. Both passes reuse the same sample distances and the plain
//! and graph renders agree bit for bit, so the sensitivities line up with
//! what pass 2 differentiates.
//!
//! Determinism: every random draw comes from a stream keyed by
//! (seed, step, window). Resuming from a checkpoint therefore replays
//! exactly the draws an uninterrupted run would have made — no RNG state
//! needs to be stored beyond the seed and the step counter.

use std::io::{self, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::EventStream;
use crate::field::{ArchConfig, FieldParams, TapedField};
use crate::geometry::{CameraIntrinsics, Trajectory};
use crate::grad::{GradError, Tape};
use crate::losses::{
    composite_loss, poap, sample_window_batch, taopet, LossConfig, SampleError, WindowSkip,
};
use crate::renderer::{render_delta_log_taped, RenderConfig};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Consecutive fully-skipped steps tolerated before aborting.
pub const MAX_SKIPPED_STEPS: usize = 100;

/// Batch-sampling rejections tolerated per window slot before the window
/// counts as skipped for the step.
const MAX_WINDOW_DRAWS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Pixels sampled per window.
    pub batch_size: usize,
    /// Windows averaged per optimization step.
    pub windows_per_step: usize,
    /// Longest window, seconds. `None` means a tenth of the stream.
    pub l_max: Option<f64>,
    /// Shortest window, seconds.
    pub l_min: f64,
    pub seed: u64,
    /// Steps between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_interval: usize,
    pub loss: LossConfig,
    pub render: RenderConfig,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            learning_rate: 2e-4,
            batch_size: 1024,
            windows_per_step: 4,
            l_max: None,
            l_min: 1e-3,
            seed: 1,
            checkpoint_interval: 0,
            loss: LossConfig::default(),
            render: RenderConfig::default(),
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn resolved_l_max(&self, duration_s: f64) -> f64 {
        self.l_max.unwrap_or(duration_s * 0.1)
    }

    pub fn validate(&self, duration_s: f64) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.windows_per_step < 1 {
            return bad("windows_per_step must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        let l_max = self.resolved_l_max(duration_s);
        if !(self.l_min > 0.0) {
            return bad(format!("l_min must be positive, got {}", self.l_min));
        }
        if self.l_min > l_max {
            return bad(format!("l_min {} exceeds l_max {l_max}", self.l_min));
        }
        if l_max > duration_s {
            return bad(format!("l_max {l_max} exceeds stream duration {duration_s}"));
        }
        self.loss.validate().map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient at parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("every window skipped for {consecutive} consecutive steps (last step {step})")]
    AllWindowsSkipped { consecutive: usize, step: u64 },
    #[error("optimizer state length {state} does not match parameter length {params}")]
    StateShapeMismatch { state: usize, params: usize },
    #[error("checkpoint: bad magic")]
    CheckpointBadMagic,
    #[error("checkpoint: unsupported version {found} (expected {CHECKPOINT_VERSION})")]
    CheckpointBadVersion { found: u32 },
    #[error("checkpoint: truncated or corrupt at byte {offset}")]
    CheckpointCorrupt { offset: u64 },
    #[error("checkpoint: parameter count {found} does not match architecture ({expected})")]
    CheckpointShapeMismatch { found: usize, expected: usize },
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream key for the draws of one (step, window) slot.
fn substream_seed(seed: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ a) ^ b)
}

/// Domain tag separating parameter initialization from window draws.
const PARAM_DOMAIN: u64 = 0x5052_4d53; // "PRMS"

pub fn param_init_seed(seed: u64) -> u64 {
    substream_seed(seed, PARAM_DOMAIN, 0)
}

/// Draws a supervision window: the end uniform over [l_min, duration], the
/// start uniform over [max(0, t - l_max), t - l_min]. All integer
/// microseconds, so the length bounds hold exactly.
pub fn draw_window<R: Rng + ?Sized>(
    duration_us: u64,
    l_max_us: u64,
    l_min_us: u64,
    rng: &mut R,
) -> (u64, u64) {
    assert!(
        l_min_us >= 1 && l_min_us <= l_max_us && l_max_us <= duration_us,
        "window bounds: 1 <= {l_min_us} <= {l_max_us} <= {duration_us}"
    );
    let t = rng.random_range(l_min_us..=duration_us);
    let lo = t.saturating_sub(l_max_us);
    let t0 = rng.random_range(lo..=t - l_min_us);
    (t0, t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Count of updates applied (Adam's bias-correction time).
    pub step: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> OptimizerState {
        OptimizerState { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(
    theta: &mut [f64],
    grad: &[f64],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<(), TrainError> {
    if state.m.len() != theta.len() || state.v.len() != theta.len() {
        return Err(TrainError::StateShapeMismatch { state: state.m.len(), params: theta.len() });
    }
    assert_eq!(theta.len(), grad.len(), "gradient length mismatch");
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient { index });
    }
    state.step += 1;
    let t = state.step as i32;
    let m_corr = 1.0 - ADAM_BETA1.powi(t);
    let v_corr = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..theta.len() {
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * grad[i];
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
        let m_hat = state.m[i] / m_corr;
        let v_hat = state.v[i] / v_corr;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// One line of the training log; serialized as newline-delimited JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss_total: f64,
    pub loss_norm: f64,
    pub loss_zero_plus: Option<f64>,
    pub loss_zero_minus: f64,
    pub taopet_mean: Option<f64>,
    pub poap: f64,
    pub poap_pos: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_consistent: usize,
}

/// What one non-skipped window contributes to a step.
struct WindowOutput {
    grad: Vec<f64>,
    loss_total: f64,
    loss_norm: f64,
    loss_zero_plus: Option<f64>,
    loss_zero_minus: f64,
    taopet_mean: Option<f64>,
    n_pos: usize,
    n_neg: usize,
    n_consistent: usize,
}

pub struct Trainer<'a> {
    stream: &'a EventStream,
    trajectory: &'a dyn Trajectory,
    k: CameraIntrinsics,
    config: TrainConfig,
    params: FieldParams,
    opt: OptimizerState,
    /// Next step index to run (also: completed step count).
    step: u64,
    skipped_streak: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        stream: &'a EventStream,
        trajectory: &'a dyn Trajectory,
        k: CameraIntrinsics,
        config: TrainConfig,
    ) -> Result<Trainer<'a>, TrainError> {
        config.validate(stream.duration_us as f64 / 1e6)?;
        let params = FieldParams::init(config.arch, param_init_seed(config.seed));
        let opt = OptimizerState::new(params.values.len());
        Ok(Trainer { stream, trajectory, k, config, params, opt, step: 0, skipped_streak: 0 })
    }

    /// Rebuilds a trainer mid-run; continues exactly like the uninterrupted
    /// run would have.
    pub fn from_checkpoint(
        stream: &'a EventStream,
        trajectory: &'a dyn Trajectory,
        k: CameraIntrinsics,
        ckpt: Checkpoint,
    ) -> Result<Trainer<'a>, TrainError> {
        ckpt.config.validate(stream.duration_us as f64 / 1e6)?;
        if ckpt.opt.m.len() != ckpt.params.values.len() {
            return Err(TrainError::StateShapeMismatch {
                state: ckpt.opt.m.len(),
                params: ckpt.params.values.len(),
            });
        }
        Ok(Trainer {
            stream,
            trajectory,
            k,
            config: ckpt.config,
            params: ckpt.params,
            opt: ckpt.opt,
            step: ckpt.step,
            skipped_streak: 0,
        })
    }

    pub fn params(&self) -> &FieldParams {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn completed_steps(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.clone(),
            opt: self.opt.clone(),
            step: self.step,
        }
    }

    fn window_bounds_us(&self) -> (u64, u64) {
        let duration_s = self.stream.duration_us as f64 / 1e6;
        let l_max_us = ((self.config.resolved_l_max(duration_s) * 1e6).round() as u64)
            .clamp(1, self.stream.duration_us);
        let l_min_us = ((self.config.l_min * 1e6).round() as u64).clamp(1, l_max_us);
        (l_min_us, l_max_us)
    }

    /// Draws, evaluates, and differentiates one window slot. `Ok(None)`
    /// means the slot is skipped this step (no usable batch, or the loss
    /// declined the window).
    fn window_contribution(
        &self,
        step: u64,
        window: u64,
    ) -> Result<Option<WindowOutput>, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(self.config.seed, step, window));
        let (l_min_us, l_max_us) = self.window_bounds_us();

        let mut batch = None;
        for _ in 0..MAX_WINDOW_DRAWS {
            let (t0, t) = draw_window(self.stream.duration_us, l_max_us, l_min_us, &mut rng);
            match sample_window_batch(
                self.stream,
                self.trajectory,
                &self.params,
                &self.k,
                t0,
                t,
                self.config.batch_size,
                self.config.loss.negative_ratio,
                &mut rng,
                &self.config.render,
            ) {
                Ok(b) => {
                    batch = Some(b);
                    break;
                }
                // An eventless window is rejected; redraw from the stream.
                Err(SampleError::NoPositivePixels { .. }) => continue,
                Err(other) => return Err(other.into()),
            }
        }
        let Some(batch) = batch else { return Ok(None) };
        let polarities = batch.polarities();

        // Pass 1: loss sensitivities to the per-pixel predictions.
        let loss_tape = Tape::new();
        let leaves = loss_tape.leaves(&batch.delta_log);
        let composite = match composite_loss(&leaves, &polarities, &self.config.loss) {
            Ok(c) => c,
            Err(WindowSkip::DegenerateNormalizer | WindowSkip::NoPositivePixels) => {
                return Ok(None)
            }
        };
        if !composite.total.value().is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        let sensitivities: Vec<f64> = match loss_tape.backward(composite.total) {
            Ok(grads) => leaves.iter().map(|l| grads.of(*l)).collect(),
            // A loss with no dependence on the predictions has zero
            // sensitivity everywhere; nothing to propagate.
            Err(GradError::ConstantOutput) => vec![0.0; leaves.len()],
            Err(e) => return Err(e.into()),
        };
        let loss_total = composite.total.value();
        let loss_norm = composite.norm.value();
        let loss_zero_plus = composite.zero_plus.map(|v| v.value());
        let loss_zero_minus = composite.zero_minus.value();
        drop(leaves);

        // Pass 2: chain each sensitivity through that pixel's render. The
        // graph is rebuilt per pixel (bounding memory to a single render)
        // but the buffer is reused.
        let mut grad = vec![0.0; self.params.values.len()];
        let mut render_tape = Tape::new();
        for (i, px) in batch.pixels.iter().enumerate() {
            if sensitivities[i] == 0.0 {
                continue;
            }
            let field = TapedField::new(&render_tape, &self.params);
            let out = render_delta_log_taped(
                &field,
                &self.k,
                &batch.pose_t0,
                &batch.pose_t,
                (px.pixel.0 as u32, px.pixel.1 as u32),
                px.channel,
                &batch.samples,
                self.config.render.background,
                self.config.render.eps_log,
            )
            .map_err(SampleError::Geometry)?;
            match render_tape.backward(out) {
                Ok(grads) => field.accumulate_param_gradients(&grads, sensitivities[i], &mut grad),
                // A render that ignores the parameters (pure background)
                // contributes nothing.
                Err(GradError::ConstantOutput) => {}
                Err(e) => return Err(e.into()),
            }
            render_tape.clear();
        }

        let stats = poap(&batch.delta_log, &polarities);
        Ok(Some(WindowOutput {
            grad,
            loss_total,
            loss_norm,
            loss_zero_plus,
            loss_zero_minus,
            taopet_mean: taopet(&batch.delta_log, &polarities).map(|t| t.mean),
            n_pos: stats.n_pos,
            n_neg: stats.n_neg,
            n_consistent: stats.n_consistent,
        }))
    }

    /// Runs one optimization step. Returns the step's log record, or `None`
    /// when every window slot was skipped (no update applied).
    pub fn step(&mut self) -> Result<Option<StepRecord>, TrainError> {
        let step = self.step;
        let windows: Vec<Option<WindowOutput>> = (0..self.config.windows_per_step as u64)
            .into_par_iter()
            .map(|w| self.window_contribution(step, w))
            .collect::<Result<_, _>>()?;
        self.step += 1;

        let used: Vec<WindowOutput> = windows.into_iter().flatten().collect();
        if used.is_empty() {
            self.skipped_streak += 1;
            if self.skipped_streak >= MAX_SKIPPED_STEPS {
                return Err(TrainError::AllWindowsSkipped {
                    consecutive: self.skipped_streak,
                    step,
                });
            }
            return Ok(None);
        }
        self.skipped_streak = 0;

        // Mean of per-window gradients over the windows that survived.
        let scale = 1.0 / used.len() as f64;
        let mut grad = vec![0.0; self.params.values.len()];
        for w in &used {
            for (g, wg) in grad.iter_mut().zip(&w.grad) {
                *g += wg;
            }
        }
        for g in &mut grad {
            *g *= scale;
        }
        adam_step(&mut self.params.values, &grad, &mut self.opt, self.config.learning_rate)?;

        let n = used.len() as f64;
        let mean = |f: &dyn Fn(&WindowOutput) -> f64| used.iter().map(|w| f(w)).sum::<f64>() / n;
        let zero_plus: Vec<f64> = used.iter().filter_map(|w| w.loss_zero_plus).collect();
        let taopets: Vec<f64> = used.iter().filter_map(|w| w.taopet_mean).collect();
        let n_pos: usize = used.iter().map(|w| w.n_pos).sum();
        let n_neg: usize = used.iter().map(|w| w.n_neg).sum();
        let n_consistent: usize = used.iter().map(|w| w.n_consistent).sum();
        Ok(Some(StepRecord {
            step,
            loss_total: mean(&|w| w.loss_total),
            loss_norm: mean(&|w| w.loss_norm),
            loss_zero_plus: if zero_plus.is_empty() {
                None
            } else {
                Some(zero_plus.iter().sum::<f64>() / zero_plus.len() as f64)
            },
            loss_zero_minus: mean(&|w| w.loss_zero_minus),
            taopet_mean: if taopets.is_empty() {
                None
            } else {
                Some(taopets.iter().sum::<f64>() / taopets.len() as f64)
            },
            poap: n_consistent as f64 / (n_pos + n_neg) as f64,
            poap_pos: if n_pos == 0 { 0.0 } else { n_consistent as f64 / n_pos as f64 },
            n_pos,
            n_neg,
            n_consistent,
        }))
    }

    /// Runs to `config.iterations` total steps, writing one JSON line per
    /// non-skipped step and checkpointing on the configured interval.
    pub fn run(
        &mut self,
        log: &mut dyn Write,
        checkpoint_path: Option<&Path>,
    ) -> Result<(), TrainError> {
        self.run_with(log, checkpoint_path, |_, _| {})
    }

    /// Like [`Trainer::run`] but calls `observe` after every step with the
    /// completed-step count and the record (absent for skipped steps).
    pub fn run_with(
        &mut self,
        log: &mut dyn Write,
        checkpoint_path: Option<&Path>,
        mut observe: impl FnMut(u64, Option<&StepRecord>),
    ) -> Result<(), TrainError> {
        while self.step < self.config.iterations as u64 {
            let record = self.step()?;
            if let Some(record) = &record {
                serde_json::to_writer(&mut *log, record)?;
                log.write_all(b"\n")?;
            }
            observe(self.step, record.as_ref());
            let interval = self.config.checkpoint_interval;
            if let Some(path) = checkpoint_path {
                if interval > 0 && self.step % interval as u64 == 0 {
                    save_checkpoint(path, &self.checkpoint())?;
                }
            }
        }
        if let Some(path) = checkpoint_path {
            save_checkpoint(path, &self.checkpoint())?;
        }
        log.flush()?;
        Ok(())
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"SAEN-CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: FieldParams,
    pub opt: OptimizerState,
    /// Completed optimization steps.
    pub step: u64,
}

/// Layout (all little-endian): magic, version u32, step u64, opt-step u64,
/// config JSON (u32 length + bytes), parameter count u64, then the theta,
/// first-moment, and second-moment vectors as raw f64 bits.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), TrainError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&ckpt.step.to_le_bytes());
    buf.extend_from_slice(&ckpt.opt.step.to_le_bytes());
    let config = serde_json::to_vec(&ckpt.config)?;
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    buf.extend_from_slice(&(ckpt.params.values.len() as u64).to_le_bytes());
    for vec in [&ckpt.params.values, &ckpt.opt.m, &ckpt.opt.v] {
        for v in vec {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct CheckpointReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CheckpointReader<R> {
    fn exact(&mut self, n: usize) -> Result<Vec<u8>, TrainError> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| TrainError::CheckpointCorrupt { offset: self.offset })?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.exact(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.exact(8)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>, TrainError> {
        let bytes = self.exact(n * 8)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let file = std::fs::File::open(path)?;
    let mut r = CheckpointReader { inner: io::BufReader::new(file), offset: 0 };
    if r.exact(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(TrainError::CheckpointBadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::CheckpointBadVersion { found: version });
    }
    let step = r.u64()?;
    let opt_step = r.u64()?;
    let config_len = r.u32()? as usize;
    let config_offset = r.offset;
    let config: TrainConfig = serde_json::from_slice(&r.exact(config_len)?)
        .map_err(|_| TrainError::CheckpointCorrupt { offset: config_offset })?;
    let param_len = r.u64()? as usize;
    let expected = crate::field::param_count(&config.arch);
    if param_len != expected {
        return Err(TrainError::CheckpointShapeMismatch { found: param_len, expected });
    }
    let values = r.f64_vec(param_len)?;
    let m = r.f64_vec(param_len)?;
    let v = r.f64_vec(param_len)?;
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing)? != 0 {
        return Err(TrainError::CheckpointCorrupt { offset: r.offset });
    }
    Ok(Checkpoint {
        params: FieldParams { arch: config.arch, values },
        config,
        opt: OptimizerState { m, v, step: opt_step },
        step,
    })
}
