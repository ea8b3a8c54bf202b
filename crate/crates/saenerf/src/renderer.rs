//! Volume rendering of per-pixel intensity and of log-intensity differences
//! between two camera poses.
//!
//! Compositing uses the classic emission-absorption model: opacity
//! `alpha_i = 1 - exp(-sigma_i * delta_i)` over segment lengths `delta_i`,
//! transmittance `T_i` as the running product of `(1 - alpha_j)`, and a solid
//! background color behind the last sample. Intensity is accumulated in the
//! factored form `c_bg + sum_i w_i * (c_i - c_bg)`, which is algebraically
//! the usual `sum_i w_i c_i + T_bg c_bg` but makes "every color equals the
//! background" produce the background *bit-exactly*, densities be damned.
//!
//! As in the field module, the plain-`f64` path and the taped path mirror
//! each other operation for operation so their values agree bitwise.

use std::io::{BufWriter, Read, Write as _};
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::Channel;
use crate::field::{FieldOutput, FieldParams, TapedField};
use crate::geometry::{pixel_ray, CameraIntrinsics, GeometryError, Pose, Ray};
use crate::grad::Var;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct RenderConfig {
    pub near: f64,
    pub far: f64,
    pub n_samples: usize,
    /// Floor added to intensity inside the log map; bounds the log gradient
    /// by `1/eps_log`.
    pub eps_log: f64,
    /// Solid background color composited behind the last sample.
    pub background: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            near: 2.0,
            far: 6.0,
            n_samples: 64,
            eps_log: 1e-5,
            background: [0.5, 0.5, 0.5],
        }
    }
}

/// Strictly increasing sample distances within `[near, far]`; segment `i`
/// spans `t_i` to `t_{i+1}`, the last one to `far`.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub distances: Vec<f64>,
    pub near: f64,
    pub far: f64,
}

impl RaySamples {
    /// Deterministic bin midpoints.
    pub fn midpoint(near: f64, far: f64, s: usize) -> RaySamples {
        Self::from_offsets(near, far, s, std::iter::repeat(0.5))
    }

    /// One uniform draw per bin.
    pub fn stratified<R: Rng + ?Sized>(near: f64, far: f64, s: usize, rng: &mut R) -> RaySamples {
        let offsets: Vec<f64> = (0..s).map(|_| rng.random::<f64>()).collect();
        Self::from_offsets(near, far, s, offsets.into_iter())
    }

    fn from_offsets(
        near: f64,
        far: f64,
        s: usize,
        offsets: impl Iterator<Item = f64>,
    ) -> RaySamples {
        assert!(near >= 0.0 && near < far, "need 0 <= near < far, got [{near}, {far}]");
        assert!(s >= 1, "need at least one sample");
        let h = (far - near) / s as f64;
        let mut distances: Vec<f64> =
            offsets.take(s).enumerate().map(|(i, u)| near + (i as f64 + u) * h).collect();
        // Strictness can only be lost to rounding at pathological scales;
        // nudge rather than fail.
        for i in 1..distances.len() {
            if distances[i] <= distances[i - 1] {
                distances[i] = distances[i - 1].next_up();
            }
        }
        RaySamples { distances, near, far }
    }

    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }

    /// Segment lengths `delta_i`; the last segment ends at `far`.
    pub fn deltas(&self) -> Vec<f64> {
        let n = self.distances.len();
        let mut d = Vec::with_capacity(n);
        for i in 0..n - 1 {
            d.push(self.distances[i + 1] - self.distances[i]);
        }
        d.push(self.far - self.distances[n - 1]);
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPixel {
    /// RGB in [0, 1].
    pub intensity: [f64; 3],
    /// `w_i = T_i * alpha_i` per sample.
    pub weights: Vec<f64>,
    /// Transmittance left after the last sample.
    pub background_weight: f64,
}

/// Anything that maps a world point and view direction to density and color.
/// Implemented by the learned field and by analytic test scenes; both render
/// through the identical compositing code below.
pub trait RadianceField: Sync {
    fn eval(&self, x: &Vector3<f64>, d: &Vector3<f64>) -> FieldOutput;
}

impl RadianceField for FieldParams {
    fn eval(&self, x: &Vector3<f64>, d: &Vector3<f64>) -> FieldOutput {
        FieldParams::eval(self, x, d)
    }
}

pub fn volume_render<F: RadianceField + ?Sized>(
    field: &F,
    ray: &Ray,
    samples: &RaySamples,
    c_bg: [f64; 3],
) -> RenderedPixel {
    let deltas = samples.deltas();
    let mut weights = Vec::with_capacity(samples.len());
    let mut terms: [Vec<f64>; 3] = [
        Vec::with_capacity(samples.len()),
        Vec::with_capacity(samples.len()),
        Vec::with_capacity(samples.len()),
    ];
    let mut transmittance = 1.0f64;
    for (&t, &delta) in samples.distances.iter().zip(&deltas) {
        let x = ray.origin + t * ray.direction;
        let out = field.eval(&x, &ray.direction);
        let alpha = 1.0 - (-(out.sigma * delta)).exp();
        let w = transmittance * alpha;
        for c in 0..3 {
            terms[c].push(w * (out.color[c] - c_bg[c]));
        }
        transmittance = transmittance * (1.0 - alpha);
        weights.push(w);
    }
    let mut intensity = [0.0; 3];
    for c in 0..3 {
        intensity[c] = terms[c].iter().fold(0.0, |a, &x| a + x) + c_bg[c];
    }
    RenderedPixel { intensity, weights, background_weight: transmittance }
}

/// Taped mirror of [`volume_render`]; returns per-channel intensity nodes.
pub fn volume_render_taped<'t>(
    field: &TapedField<'t>,
    ray: &Ray,
    samples: &RaySamples,
    c_bg: [f64; 3],
) -> [Var<'t>; 3] {
    let tape = field.tape();
    let deltas = samples.deltas();
    let mut terms: [Vec<Var<'t>>; 3] = [
        Vec::with_capacity(samples.len()),
        Vec::with_capacity(samples.len()),
        Vec::with_capacity(samples.len()),
    ];
    let mut transmittance = tape.constant(1.0);
    for (&t, &delta) in samples.distances.iter().zip(&deltas) {
        let x = ray.origin + t * ray.direction;
        let (sigma, color) = field.eval(&x, &ray.direction);
        let alpha = 1.0 - (-(sigma * delta)).exp();
        let w = transmittance * alpha;
        for c in 0..3 {
            terms[c].push(w * (color[c] - c_bg[c]));
        }
        transmittance = transmittance * (1.0 - alpha);
    }
    let mut intensity = [transmittance; 3];
    for c in 0..3 {
        intensity[c] = tape.sum(&terms[c]) + c_bg[c];
    }
    intensity
}

/// `ln(intensity + eps)`.
pub fn log_intensity(intensity: f64, eps: f64) -> f64 {
    (intensity + eps).ln()
}

/// The scalar a pixel's filter extracts from an RGB intensity.
pub fn channel_intensity(intensity: &[f64; 3], channel: Channel) -> f64 {
    match channel.rgb_index() {
        Some(i) => intensity[i],
        None => (intensity[0] + intensity[1] + intensity[2]) / 3.0,
    }
}

fn channel_intensity_taped<'t>(intensity: &[Var<'t>; 3], channel: Channel) -> Var<'t> {
    match channel.rgb_index() {
        Some(i) => intensity[i],
        None => (intensity[0] + intensity[1] + intensity[2]) / 3.0,
    }
}

/// Predicted log-intensity difference of pixel `u` between two poses, in the
/// pixel's own channel. Both renders reuse the same sample distances — one
/// stratification draw per window, which cuts the variance of the
/// difference without biasing it.
#[allow(clippy::too_many_arguments)]
pub fn render_delta_log<F: RadianceField + ?Sized>(
    field: &F,
    k: &CameraIntrinsics,
    pose_t0: &Pose,
    pose_t: &Pose,
    u: (u32, u32),
    channel: Channel,
    samples: &RaySamples,
    c_bg: [f64; 3],
    eps_log: f64,
) -> Result<f64, GeometryError> {
    let uv = (u.0 as f64, u.1 as f64);
    let ray0 = pixel_ray(k, pose_t0, uv)?;
    let ray1 = pixel_ray(k, pose_t, uv)?;
    let i0 = volume_render(field, &ray0, samples, c_bg).intensity;
    let i1 = volume_render(field, &ray1, samples, c_bg).intensity;
    let l0 = log_intensity(channel_intensity(&i0, channel), eps_log);
    let l1 = log_intensity(channel_intensity(&i1, channel), eps_log);
    Ok(l1 - l0)
}

/// Taped mirror of [`render_delta_log`].
#[allow(clippy::too_many_arguments)]
pub fn render_delta_log_taped<'t>(
    field: &TapedField<'t>,
    k: &CameraIntrinsics,
    pose_t0: &Pose,
    pose_t: &Pose,
    u: (u32, u32),
    channel: Channel,
    samples: &RaySamples,
    c_bg: [f64; 3],
    eps_log: f64,
) -> Result<Var<'t>, GeometryError> {
    let uv = (u.0 as f64, u.1 as f64);
    let ray0 = pixel_ray(k, pose_t0, uv)?;
    let ray1 = pixel_ray(k, pose_t, uv)?;
    let i0 = volume_render_taped(field, &ray0, samples, c_bg);
    let i1 = volume_render_taped(field, &ray1, samples, c_bg);
    let l0 = (channel_intensity_taped(&i0, channel) + eps_log).ln();
    let l1 = (channel_intensity_taped(&i1, channel) + eps_log).ln();
    Ok(l1 - l0)
}

/// Row-major RGB image with values in [0, 1], top-left origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
    #[error("bad portable pixmap: {0}")]
    Ppm(String),
    #[error("unsupported image extension {0:?} (use .png or .ppm)")]
    UnknownExtension(String),
}

impl Image {
    pub fn new(width: u32, height: u32) -> Image {
        Image { width, height, data: vec![0.0; (width * height * 3) as usize] }
    }

    pub fn get(&self, x: u32, y: u32) -> [f64; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [f64; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn save_png8(&self, path: &Path) -> Result<(), ImageIoError> {
        let bytes: Vec<u8> =
            self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let img = image::RgbImage::from_raw(self.width, self.height, bytes)
            .expect("buffer length matches dimensions");
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn save_ppm16(&self, path: &Path) -> Result<(), ImageIoError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        write!(w, "P6\n{} {}\n65535\n", self.width, self.height)?;
        for &v in &self.data {
            let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
            w.write_all(&q.to_be_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Loads `.png` (8-bit) or `.ppm` (16-bit, as written by
    /// [`Image::save_ppm16`]) back into [0, 1] floats.
    pub fn load(path: &Path) -> Result<Image, ImageIoError> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("png") => {
                let img = image::open(path)?.to_rgb8();
                let (width, height) = img.dimensions();
                let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
                Ok(Image { width, height, data })
            }
            Some("ppm") => load_ppm16(path),
            other => Err(ImageIoError::UnknownExtension(
                other.unwrap_or("<none>").to_string(),
            )),
        }
    }
}

fn load_ppm16(path: &Path) -> Result<Image, ImageIoError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let header_err = |m: &str| ImageIoError::Ppm(m.to_string());
    // Header: "P6\n<width> <height>\n65535\n" exactly as our writer emits.
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(header_err("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| header_err("non-ascii header"))?);
    }
    if fields[0] != "P6" {
        return Err(header_err("not a P6 pixmap"));
    }
    let width: u32 = fields[1].parse().map_err(|_| header_err("bad width"))?;
    let height: u32 = fields[2].parse().map_err(|_| header_err("bad height"))?;
    if fields[3] != "65535" {
        return Err(header_err("expected 16-bit maxval 65535"));
    }
    pos += 1; // single whitespace byte after maxval
    let need = (width * height * 3) as usize * 2;
    let raster = &bytes[pos..];
    if raster.len() != need {
        return Err(header_err(&format!("raster is {} bytes, expected {need}", raster.len())));
    }
    let data = raster
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
        .collect();
    Ok(Image { width, height, data })
}

/// Full-frame render with deterministic midpoint sampling. Pure: identical
/// inputs give identical bits.
pub fn render_image<F: RadianceField + ?Sized>(
    field: &F,
    k: &CameraIntrinsics,
    pose: &Pose,
    cfg: &RenderConfig,
) -> Image {
    let samples = RaySamples::midpoint(cfg.near, cfg.far, cfg.n_samples);
    let rows: Vec<Vec<[f64; 3]>> = (0..k.height)
        .into_par_iter()
        .map(|y| {
            (0..k.width)
                .map(|x| {
                    let ray = pixel_ray(k, pose, (x as f64, y as f64))
                        .expect("loop stays within sensor bounds");
                    volume_render(field, &ray, &samples, cfg.background).intensity
                })
                .collect()
        })
        .collect();
    let mut img = Image::new(k.width, k.height);
    for (y, row) in rows.iter().enumerate() {
        for (x, rgb) in row.iter().enumerate() {
            img.set(x as u32, y as u32, *rgb);
        }
    }
    img
}
