//! Image quality evaluation: brightness alignment, gamma correction, PSNR,
//! and single-scale SSIM, plus the report type the CLI serializes.
//!
//! Event supervision fixes intensity only up to a global offset in log
//! space, so a reconstruction can be a faithful shape at the wrong overall
//! brightness. Evaluation therefore aligns each rendered channel to the
//! target with one least-squares scalar before scoring — a declared,
//! minimal anchor (one number per channel) rather than a hidden advantage.
//!
//! The pipeline order is fixed: align in linear space, then gamma-correct
//! both sides, then score. Tests pin the composed result so a reordering
//! cannot slip through.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::renderer::Image;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("image dimensions differ: {a_width}x{a_height} vs {b_width}x{b_height}")]
    DimensionMismatch { a_width: u32, a_height: u32, b_width: u32, b_height: u32 },
    #[error("image {width}x{height} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window")]
    TooSmall { width: u32, height: u32 },
    #[error("no image pairs to evaluate")]
    Empty,
}

fn check_dims(a: &Image, b: &Image) -> Result<(), EvalError> {
    if a.width != b.width || a.height != b.height {
        return Err(EvalError::DimensionMismatch {
            a_width: a.width,
            a_height: a.height,
            b_width: b.width,
            b_height: b.height,
        });
    }
    Ok(())
}

/// Display transfer `v -> v^(1/gamma)` per channel.
pub fn gamma_correct(img: &Image, gamma: f64) -> Image {
    assert!(gamma > 0.0, "gamma must be positive, got {gamma}");
    let inv = 1.0 / gamma;
    Image { width: img.width, height: img.height, data: img.data.iter().map(|v| v.powf(inv)).collect() }
}

/// Scales each rendered channel by the least-squares brightness factor
/// against the target (`s = sum(r*t) / sum(r*r)`), then clips to [0,1].
/// A channel with no signal is left at scale 1.
pub fn align_brightness(rendered: &Image, target: &Image) -> Result<Image, EvalError> {
    check_dims(rendered, target)?;
    let mut num = [0.0f64; 3];
    let mut den = [0.0f64; 3];
    for (r, t) in rendered.data.chunks_exact(3).zip(target.data.chunks_exact(3)) {
        for c in 0..3 {
            num[c] += r[c] * t[c];
            den[c] += r[c] * r[c];
        }
    }
    let scale: Vec<f64> = (0..3).map(|c| if den[c] == 0.0 { 1.0 } else { num[c] / den[c] }).collect();
    let data = rendered
        .data
        .iter()
        .enumerate()
        .map(|(i, v)| (scale[i % 3] * v).clamp(0.0, 1.0))
        .collect();
    Ok(Image { width: rendered.width, height: rendered.height, data })
}

fn mse(a: &Image, b: &Image) -> f64 {
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum();
    sum / a.data.len() as f64
}

/// Mean squared error below this reports the capped PSNR.
pub const PSNR_MSE_FLOOR: f64 = 1e-10;
pub const PSNR_CAP_DB: f64 = 99.0;

/// `10 log10(1 / MSE)` over all channels, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, EvalError> {
    check_dims(a, b)?;
    let mse = mse(a, b);
    if mse < PSNR_MSE_FLOOR {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Dynamic range of the inputs.
const SSIM_L: f64 = 1.0;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let mut sum = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let g = (-((dx * dx + dy * dy) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[((dy + r) * SSIM_WINDOW as isize + (dx + r)) as usize] = g;
            sum += g;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

fn grayscale(img: &Image) -> Vec<f64> {
    img.data.chunks_exact(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect()
}

/// Single-scale structural similarity on the channel-mean grayscale,
/// Gaussian-weighted 11x11 windows, averaged over fully-interior windows
/// only. Identical inputs score exactly 1 (the two quadratic forms are
/// computed with the same expression shape, so they match bit for bit).
pub fn ssim(a: &Image, b: &Image) -> Result<f64, EvalError> {
    check_dims(a, b)?;
    let (w, h) = (a.width as usize, a.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(EvalError::TooSmall { width: a.width, height: a.height });
    }
    let x = grayscale(a);
    let y = grayscale(b);
    let win = gaussian_window();
    let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
    let c2 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);
    let r = SSIM_WINDOW / 2;

    let mut total = 0.0;
    let mut windows = 0usize;
    for cy in r..h - r {
        for cx in r..w - r {
            let mut mu_x = 0.0;
            let mut mu_y = 0.0;
            let mut xx = 0.0;
            let mut yy = 0.0;
            let mut xy = 0.0;
            for dy in 0..SSIM_WINDOW {
                let row = (cy + dy - r) * w + cx - r;
                let wrow = dy * SSIM_WINDOW;
                for dx in 0..SSIM_WINDOW {
                    let g = win[wrow + dx];
                    let xv = x[row + dx];
                    let yv = y[row + dx];
                    mu_x += g * xv;
                    mu_y += g * yv;
                    xx += g * xv * xv;
                    yy += g * yv * yv;
                    xy += g * xv * yv;
                }
            }
            let var_x = xx - mu_x * mu_x;
            let var_y = yy - mu_y * mu_y;
            let cov = xy - mu_x * mu_y;
            let s = ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2))
                / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2));
            total += s;
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

/// Fixed evaluation order for one image pair: brightness-align the render,
/// gamma-correct both sides, then score.
pub fn evaluate_pair(rendered: &Image, target: &Image, gamma: f64) -> Result<PairMetrics, EvalError> {
    let aligned = align_brightness(rendered, target)?;
    let pr = gamma_correct(&aligned, gamma);
    let pt = gamma_correct(target, gamma);
    Ok(PairMetrics { psnr: psnr(&pr, &pt)?, ssim: ssim(&pr, &pt)? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub gamma: f64,
    pub images: Vec<ImageReport>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Scores every (name, rendered, target) triple and aggregates the means.
pub fn report(pairs: &[(String, &Image, &Image)], gamma: f64) -> Result<MetricReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut images = Vec::with_capacity(pairs.len());
    for (name, rendered, target) in pairs {
        let m = evaluate_pair(rendered, target, gamma)?;
        images.push(ImageReport { name: name.clone(), psnr: m.psnr, ssim: m.ssim });
    }
    let n = images.len() as f64;
    Ok(MetricReport {
        gamma,
        mean_psnr: images.iter().map(|i| i.psnr).sum::<f64>() / n,
        mean_ssim: images.iter().map(|i| i.ssim).sum::<f64>() / n,
        images,
    })
}
