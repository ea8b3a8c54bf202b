//! The supervision objective: normalized polarity-matching losses, zero-event
//! regularizers, their composite, and the diagnostics that watch them.
//!
//! Event accumulation only fixes log-intensity *changes* up to the unknown
//! camera threshold, so raw predictions and polarity counts live on
//! incommensurate scales. The loss family sidesteps the threshold entirely by
//! normalizing both sides to unit mass before comparing:
//!
//! * the plain normalized loss divides by norms over **all** sampled pixels,
//! * the "minus" variant divides by norms over event-firing pixels only,
//! * the "plus" variant divides by norms over the *consistent* subset — the
//!   firing pixels whose current prediction already has the right sign —
//!   which stops sign-flipped pixels from dragging the normalizer around.
//!
//! Two regularizers pin down the zero-event region: an absolute one (L1 over
//! quiet pixels) and a relative one (quiet mass over firing mass), the latter
//! scale-free like the normalized losses.
//!
//! Everything here is differentiable with respect to the predicted
//! log-intensity differences; set membership is recomputed each forward pass
//! but treated as constant under differentiation (the indicator is piecewise
//! constant, so this is the only sensible convention).

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{accumulate, bayer_channel, Channel, EventError, EventStream};
use crate::geometry::{CameraIntrinsics, GeometryError, Pose, Trajectory};
use crate::grad::Var;
use crate::renderer::{render_delta_log, RadianceField, RaySamples, RenderConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormVariant {
    /// Normalizers over all sampled pixels.
    Norm,
    /// Normalizers over event-firing pixels.
    NormMinus,
    /// Normalizers over sign-consistent firing pixels.
    #[default]
    NormPlus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InnerNorm {
    /// Sum of absolute values.
    #[default]
    L1,
    /// Euclidean norm (ablation).
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub variant: NormVariant,
    pub inner_norm: InnerNorm,
    /// Weight of the relative zero-event term.
    pub lambda: f64,
    /// Weight of the absolute zero-event term.
    pub lambda0: f64,
    /// Fraction of each batch drawn from quiet pixels.
    pub negative_ratio: f64,
    /// Guard added to (or compared against) ratio denominators.
    pub eps_div: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            variant: NormVariant::NormPlus,
            inner_norm: InnerNorm::L1,
            lambda: 0.5,
            lambda0: 0.0,
            negative_ratio: 0.05,
            eps_div: 1e-8,
        }
    }
}

#[derive(Debug, Error)]
#[error("loss config: {0}")]
pub struct InvalidLossConfig(String);

impl LossConfig {
    /// Heavier regularization used by the quick-training preset.
    pub fn fast_preset() -> LossConfig {
        LossConfig { lambda: 1.0, lambda0: 0.5, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), InvalidLossConfig> {
        let nonneg = [
            ("lambda", self.lambda),
            ("lambda0", self.lambda0),
            ("negative_ratio", self.negative_ratio),
        ];
        for (name, v) in nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(InvalidLossConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.eps_div > 0.0) || !self.eps_div.is_finite() {
            return Err(InvalidLossConfig(format!(
                "eps_div must be finite and > 0, got {}",
                self.eps_div
            )));
        }
        Ok(())
    }
}

/// Why a window (or one of its terms) produced no loss value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowSkip {
    /// A normalizer came out at or below the guard.
    DegenerateNormalizer,
    /// The window sampled no event-firing pixels.
    NoPositivePixels,
}

/// Index sets over a batch: `positive` fired events, `negative` stayed
/// quiet, `consistent` fired *and* the current prediction strictly matches
/// the polarity sign.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Masks {
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
    pub consistent: Vec<usize>,
}

pub fn classify_pixels(polarities: &[i64], delta_log: &[f64]) -> Masks {
    assert_eq!(polarities.len(), delta_log.len(), "misaligned batch");
    let mut m = Masks::default();
    for (i, (&e, &dl)) in polarities.iter().zip(delta_log).enumerate() {
        if e == 0 {
            m.negative.push(i);
        } else {
            m.positive.push(i);
            // Strictly positive product: a zero prediction at a firing
            // pixel counts as inconsistent.
            if dl * e as f64 > 0.0 {
                m.consistent.push(i);
            }
        }
    }
    m
}

fn plain_values(dl: &[Var<'_>]) -> Vec<f64> {
    dl.iter().map(|v| v.value()).collect()
}

/// Differentiable normalizer of the selected predictions.
fn prediction_normalizer<'t>(
    dl: &[Var<'t>],
    subset: &[usize],
    which: InnerNorm,
) -> Result<Var<'t>, WindowSkip> {
    assert!(!dl.is_empty());
    let tape = dl[0].tape();
    match which {
        InnerNorm::L1 => {
            let terms: Vec<Var<'t>> = subset.iter().map(|&i| dl[i].abs()).collect();
            let norm = tape.sum(&terms);
            if norm.value() <= 0.0 {
                return Err(WindowSkip::DegenerateNormalizer);
            }
            Ok(norm)
        }
        InnerNorm::L2 => {
            let picked: Vec<Var<'t>> = subset.iter().map(|&i| dl[i]).collect();
            let ssq = tape.dot(&picked, &picked);
            if ssq.value() <= 0.0 {
                return Err(WindowSkip::DegenerateNormalizer);
            }
            // sqrt via exp(ln/2); the op set has no square root.
            Ok((ssq.ln() * 0.5).exp())
        }
    }
}

/// Constant normalizer of the selected polarity counts.
fn polarity_normalizer(e: &[i64], subset: &[usize], which: InnerNorm) -> f64 {
    match which {
        InnerNorm::L1 => subset.iter().map(|&i| (e[i] as f64).abs()).sum(),
        InnerNorm::L2 => subset
            .iter()
            .map(|&i| (e[i] as f64) * (e[i] as f64))
            .sum::<f64>()
            .sqrt(),
    }
}

/// Mean over the whole batch of the squared gap between the two normalized
/// vectors, with normalizers taken over `subset`.
fn normalized_gap_loss<'t>(
    dl: &[Var<'t>],
    e: &[i64],
    subset: &[usize],
    cfg: &LossConfig,
) -> Result<Var<'t>, WindowSkip> {
    let tape = dl[0].tape();
    let denom_dl = prediction_normalizer(dl, subset, cfg.inner_norm)?;
    let denom_e = polarity_normalizer(e, subset, cfg.inner_norm);
    if denom_dl.value() <= cfg.eps_div || denom_e <= cfg.eps_div {
        return Err(WindowSkip::DegenerateNormalizer);
    }
    let terms: Vec<Var<'t>> = dl
        .iter()
        .zip(e)
        .map(|(&d, &ei)| {
            let gap = d / denom_dl - ei as f64 / denom_e;
            gap * gap
        })
        .collect();
    Ok(tape.sum(&terms) / dl.len() as f64)
}

/// Normalizers over all sampled pixels.
pub fn loss_norm<'t>(
    dl: &[Var<'t>],
    e: &[i64],
    cfg: &LossConfig,
) -> Result<Var<'t>, WindowSkip> {
    assert_eq!(dl.len(), e.len(), "misaligned batch");
    assert!(!dl.is_empty(), "empty batch");
    let all: Vec<usize> = (0..dl.len()).collect();
    normalized_gap_loss(dl, e, &all, cfg)
}

/// Normalizers over event-firing pixels only; numerators still range over
/// the whole batch.
pub fn loss_norm_minus<'t>(
    dl: &[Var<'t>],
    e: &[i64],
    cfg: &LossConfig,
) -> Result<Var<'t>, WindowSkip> {
    assert_eq!(dl.len(), e.len(), "misaligned batch");
    assert!(!dl.is_empty(), "empty batch");
    let masks = classify_pixels(e, &plain_values(dl));
    if masks.positive.is_empty() {
        return Err(WindowSkip::NoPositivePixels);
    }
    normalized_gap_loss(dl, e, &masks.positive, cfg)
}

#[derive(Debug, Clone, Copy)]
pub struct NormPlusLoss<'t> {
    pub value: Var<'t>,
    /// True when no pixel was sign-consistent and the firing-pixel
    /// normalizer was used instead.
    pub fell_back: bool,
}

/// Normalizers over the sign-consistent subset; falls back to the
/// firing-pixel normalizer when that subset is empty or degenerate.
pub fn loss_norm_plus<'t>(
    dl: &[Var<'t>],
    e: &[i64],
    cfg: &LossConfig,
) -> Result<NormPlusLoss<'t>, WindowSkip> {
    assert_eq!(dl.len(), e.len(), "misaligned batch");
    assert!(!dl.is_empty(), "empty batch");
    let masks = classify_pixels(e, &plain_values(dl));
    if masks.positive.is_empty() {
        return Err(WindowSkip::NoPositivePixels);
    }
    if !masks.consistent.is_empty() {
        match normalized_gap_loss(dl, e, &masks.consistent, cfg) {
            Ok(value) => return Ok(NormPlusLoss { value, fell_back: false }),
            Err(WindowSkip::DegenerateNormalizer) => {} // fall through
            Err(other) => return Err(other),
        }
    }
    let value = normalized_gap_loss(dl, e, &masks.positive, cfg)?;
    Ok(NormPlusLoss { value, fell_back: true })
}

/// Absolute quiet-pixel penalty: the L1 sum of predictions over pixels that
/// fired no events. Zero iff every quiet prediction is zero.
pub fn loss_zero_minus<'t>(dl: &[Var<'t>], e: &[i64]) -> Var<'t> {
    assert_eq!(dl.len(), e.len(), "misaligned batch");
    assert!(!dl.is_empty(), "empty batch");
    let tape = dl[0].tape();
    let terms: Vec<Var<'t>> = dl
        .iter()
        .zip(e)
        .filter(|(_, &ei)| ei == 0)
        .map(|(&d, _)| d.abs())
        .collect();
    tape.sum(&terms)
}

/// Relative quiet-pixel penalty: quiet L1 mass over firing L1 mass (guarded).
/// Scale-free, so it composes with the normalized losses without a tuned
/// magnitude.
pub fn loss_zero_plus<'t>(
    dl: &[Var<'t>],
    e: &[i64],
    eps_div: f64,
) -> Result<Var<'t>, WindowSkip> {
    assert_eq!(dl.len(), e.len(), "misaligned batch");
    assert!(!dl.is_empty(), "empty batch");
    let tape = dl[0].tape();
    let mut quiet = Vec::new();
    let mut firing = Vec::new();
    for (&d, &ei) in dl.iter().zip(e) {
        if ei == 0 {
            quiet.push(d.abs());
        } else {
            firing.push(d.abs());
        }
    }
    if firing.is_empty() {
        return Err(WindowSkip::NoPositivePixels);
    }
    let num = tape.sum(&quiet);
    let den = tape.sum(&firing) + eps_div;
    Ok(num / den)
}

/// The assembled objective and its logged parts.
#[derive(Debug, Clone, Copy)]
pub struct CompositeLoss<'t> {
    pub total: Var<'t>,
    pub norm: Var<'t>,
    /// Absent when the window had no firing pixels to normalize against
    /// (then it simply isn't added).
    pub zero_plus: Option<Var<'t>>,
    pub zero_minus: Var<'t>,
    pub fell_back: bool,
}

/// `variant + lambda * zero_plus + lambda0 * zero_minus`. The regularizer
/// values are always computed for logging but only *added* when their
/// weight is nonzero, so zero weights reproduce the bare variant bit for
/// bit. A skip from the variant loss skips the whole window.
pub fn composite_loss<'t>(
    dl: &[Var<'t>],
    e: &[i64],
    cfg: &LossConfig,
) -> Result<CompositeLoss<'t>, WindowSkip> {
    let (norm, fell_back) = match cfg.variant {
        NormVariant::Norm => (loss_norm(dl, e, cfg)?, false),
        NormVariant::NormMinus => (loss_norm_minus(dl, e, cfg)?, false),
        NormVariant::NormPlus => {
            let out = loss_norm_plus(dl, e, cfg)?;
            (out.value, out.fell_back)
        }
    };
    let zero_minus = loss_zero_minus(dl, e);
    let zero_plus = loss_zero_plus(dl, e, cfg.eps_div).ok();
    let mut total = norm;
    if cfg.lambda > 0.0 {
        if let Some(zp) = zero_plus {
            total = total + cfg.lambda * zp;
        }
    }
    if cfg.lambda0 > 0.0 {
        total = total + cfg.lambda0 * zero_minus;
    }
    Ok(CompositeLoss { total, norm, zero_plus, zero_minus, fell_back })
}

/// Per-pixel implied threshold `prediction / polarity` over firing pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpliedThreshold {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Mean (and range) of the implied per-pixel event threshold. `None` when
/// no pixel fired.
pub fn taopet(delta_log: &[f64], e: &[i64]) -> Option<ImpliedThreshold> {
    let ratios: Vec<f64> = delta_log
        .iter()
        .zip(e)
        .filter(|(_, &ei)| ei != 0)
        .map(|(&d, &ei)| d / ei as f64)
        .collect();
    if ratios.is_empty() {
        return None;
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let min = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let max = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some(ImpliedThreshold { mean, min, max })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyStats {
    /// Consistent pixels over ALL sampled pixels.
    pub poap: f64,
    /// Consistent pixels over firing pixels (0 when none fired).
    pub poap_pos: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_consistent: usize,
}

/// Fraction of pixels whose prediction sign already matches the events.
pub fn poap(delta_log: &[f64], e: &[i64]) -> ConsistencyStats {
    assert!(!e.is_empty(), "empty batch");
    let masks = classify_pixels(e, delta_log);
    let l = masks.consistent.len();
    ConsistencyStats {
        poap: l as f64 / e.len() as f64,
        poap_pos: if masks.positive.is_empty() {
            0.0
        } else {
            l as f64 / masks.positive.len() as f64
        },
        n_pos: masks.positive.len(),
        n_neg: masks.negative.len(),
        n_consistent: l,
    }
}

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("window [{t0_us},{t_us}) has no event-firing pixels")]
    NoPositivePixels { t0_us: u64, t_us: u64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Events(#[from] EventError),
}

/// One sampled pixel of a training window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelSample {
    pub pixel: (u16, u16),
    pub channel: Channel,
    /// Accumulated polarity over the window.
    pub polarity: i64,
}

/// A supervision window: its poses, the shared per-window sample distances,
/// the chosen pixels, and the plain forward predictions for each.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub t0_us: u64,
    pub t_us: u64,
    pub pose_t0: Pose,
    pub pose_t: Pose,
    pub samples: RaySamples,
    pub pixels: Vec<PixelSample>,
    pub delta_log: Vec<f64>,
}

impl WindowBatch {
    pub fn polarities(&self) -> Vec<i64> {
        self.pixels.iter().map(|p| p.polarity).collect()
    }
}

/// Returns the `rank`-th smallest index of `0..total` that is NOT in the
/// ascending `excluded` list.
fn nth_not_excluded(rank: usize, excluded: &[usize]) -> usize {
    let mut idx = rank;
    for &e in excluded {
        if e <= idx {
            idx += 1;
        } else {
            break;
        }
    }
    idx
}

/// Assembles a training window: accumulates polarities, draws
/// `ceil(ratio*n)` quiet pixels and the rest from firing pixels (without
/// replacement, clamped to availability), then renders the prediction for
/// every chosen pixel in its own Bayer channel. One stratified distance draw
/// is shared by all renders of the window.
#[allow(clippy::too_many_arguments)]
pub fn sample_window_batch<F, R>(
    stream: &EventStream,
    trajectory: &dyn Trajectory,
    field: &F,
    k: &CameraIntrinsics,
    t0_us: u64,
    t_us: u64,
    n: usize,
    negative_ratio: f64,
    rng: &mut R,
    cfg: &RenderConfig,
) -> Result<WindowBatch, SampleError>
where
    F: RadianceField + ?Sized,
    R: Rng + ?Sized,
{
    assert!(n >= 1, "batch needs at least one pixel");
    assert_eq!((k.width, k.height), (stream.width, stream.height), "sensor size mismatch");
    let acc = accumulate(stream, t0_us, t_us, None)?;
    if acc.is_empty() {
        return Err(SampleError::NoPositivePixels { t0_us, t_us });
    }

    let firing: Vec<((u16, u16), i64)> = acc.iter().collect();
    let n_neg_req = (negative_ratio * n as f64).ceil() as usize;
    let n_pos_req = n.saturating_sub(n_neg_req);

    let width = stream.width as usize;
    let total_pixels = width * stream.height as usize;
    let firing_linear: Vec<usize> = {
        let mut v: Vec<usize> =
            firing.iter().map(|((x, y), _)| *y as usize * width + *x as usize).collect();
        v.sort_unstable();
        v
    };
    let quiet_total = total_pixels - firing_linear.len();

    let mut pixels = Vec::with_capacity(n);
    let n_pos = n_pos_req.min(firing.len());
    for i in sample_indices(rng, firing.len(), n_pos) {
        let ((x, y), polarity) = firing[i];
        pixels.push(PixelSample {
            pixel: (x, y),
            channel: bayer_channel(x as u32, y as u32, stream.pattern),
            polarity,
        });
    }
    let n_neg = n_neg_req.min(quiet_total);
    for r in sample_indices(rng, quiet_total, n_neg) {
        let lin = nth_not_excluded(r, &firing_linear);
        let (x, y) = ((lin % width) as u16, (lin / width) as u16);
        pixels.push(PixelSample {
            pixel: (x, y),
            channel: bayer_channel(x as u32, y as u32, stream.pattern),
            polarity: 0,
        });
    }

    let samples = RaySamples::stratified(cfg.near, cfg.far, cfg.n_samples, rng);
    let pose_t0 = trajectory.pose_at(t0_us as f64 / 1e6)?;
    let pose_t = trajectory.pose_at(t_us as f64 / 1e6)?;

    let delta_log = pixels
        .par_iter()
        .map(|p| {
            render_delta_log(
                field,
                k,
                &pose_t0,
                &pose_t,
                (p.pixel.0 as u32, p.pixel.1 as u32),
                p.channel,
                &samples,
                cfg.background,
                cfg.eps_log,
            )
        })
        .collect::<Result<Vec<f64>, GeometryError>>()?;

    Ok(WindowBatch { t0_us, t_us, pose_t0, pose_t, samples, pixels, delta_log })
}
