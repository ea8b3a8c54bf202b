//! Procedural toy scenes with analytic density and color.
//!
//! These stand in for real captures on both ends of the pipeline: their
//! renders feed the event simulator (after the log map), and the same
//! renders are the targets the reconstructed field is scored against. A
//! scene implements [`RadianceField`], so ground truth goes through the
//! *identical* compositing code as the learned model — any bias in the
//! renderer cancels out of the comparison.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::events::{bayer_channel, BayerPattern, LogFrame};
use crate::field::FieldOutput;
use crate::geometry::{CameraIntrinsics, GeometryError, Pose, Trajectory};
use crate::renderer::{channel_intensity, log_intensity, render_image, Image, RadianceField, RenderConfig};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("primitive {index}: density {density} must be finite and non-negative")]
    BadDensity { index: usize, density: f64 },
    #[error("primitive {index}: color component {value} outside [0,1]")]
    BadColor { index: usize, value: f64 },
    #[error("background color component {0} outside [0,1]")]
    BadBackground(f64),
    #[error("primitive {index}: radius {radius} must be positive")]
    BadRadius { index: usize, radius: f64 },
    #[error("primitive {index}: box min must be strictly below max on every axis")]
    BadBox { index: usize },
    #[error("primitive {index} pokes outside the scene bounds")]
    OutsideBounds { index: usize },
    #[error("scene bounds min must be strictly below max on every axis")]
    BadBounds,
    #[error("no preset named {0:?} (have: two-blobs, box-and-sphere)")]
    UnknownPreset(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("scene file: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    Sphere { center: [f64; 3], radius: f64, color: [f64; 3], density: f64 },
    Box { min: [f64; 3], max: [f64; 3], color: [f64; 3], density: f64 },
}

impl Primitive {
    pub fn contains(&self, x: &Vector3<f64>) -> bool {
        match self {
            Primitive::Sphere { center, radius, .. } => {
                let c = Vector3::from(*center);
                (x - c).norm_squared() <= radius * radius
            }
            Primitive::Box { min, max, .. } => {
                (0..3).all(|i| min[i] <= x[i] && x[i] <= max[i])
            }
        }
    }

    pub fn color(&self) -> [f64; 3] {
        match self {
            Primitive::Sphere { color, .. } | Primitive::Box { color, .. } => *color,
        }
    }

    pub fn density(&self) -> f64 {
        match self {
            Primitive::Sphere { density, .. } | Primitive::Box { density, .. } => *density,
        }
    }

    fn aabb(&self) -> ([f64; 3], [f64; 3]) {
        match self {
            Primitive::Sphere { center, radius, .. } => (
                [center[0] - radius, center[1] - radius, center[2] - radius],
                [center[0] + radius, center[1] + radius, center[2] + radius],
            ),
            Primitive::Box { min, max, .. } => (*min, *max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyScene {
    pub primitives: Vec<Primitive>,
    /// Solid background color; also what empty space shades to.
    pub background: [f64; 3],
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
}

impl ToyScene {
    pub fn validate(&self) -> Result<(), SceneError> {
        if !(0..3).all(|i| self.bounds_min[i] < self.bounds_max[i]) {
            return Err(SceneError::BadBounds);
        }
        for &b in &self.background {
            if !(0.0..=1.0).contains(&b) {
                return Err(SceneError::BadBackground(b));
            }
        }
        for (index, p) in self.primitives.iter().enumerate() {
            let d = p.density();
            if !d.is_finite() || d < 0.0 {
                return Err(SceneError::BadDensity { index, density: d });
            }
            for &c in &p.color() {
                if !(0.0..=1.0).contains(&c) {
                    return Err(SceneError::BadColor { index, value: c });
                }
            }
            match p {
                Primitive::Sphere { radius, .. } if !(radius > &0.0) => {
                    return Err(SceneError::BadRadius { index, radius: *radius });
                }
                Primitive::Box { min, max, .. } if !(0..3).all(|i| min[i] < max[i]) => {
                    return Err(SceneError::BadBox { index });
                }
                _ => {}
            }
            let (lo, hi) = p.aabb();
            let inside = (0..3)
                .all(|i| lo[i] >= self.bounds_min[i] && hi[i] <= self.bounds_max[i]);
            if !inside {
                return Err(SceneError::OutsideBounds { index });
            }
        }
        Ok(())
    }

    /// Density is the sum over containing primitives; color their
    /// density-weighted mean, or the background where nothing contains `x`.
    pub fn eval(&self, x: &Vector3<f64>) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut weighted = [0.0; 3];
        for p in &self.primitives {
            if p.contains(x) {
                let d = p.density();
                sigma += d;
                let c = p.color();
                for i in 0..3 {
                    weighted[i] += d * c[i];
                }
            }
        }
        if sigma == 0.0 {
            (0.0, self.background)
        } else {
            (sigma, [weighted[0] / sigma, weighted[1] / sigma, weighted[2] / sigma])
        }
    }

    pub fn to_json_file(&self, path: &Path) -> Result<(), SceneError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<ToyScene, SceneError> {
        let scene: ToyScene = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        scene.validate()?;
        Ok(scene)
    }

    /// Named preset, or a scene file path if no preset matches.
    pub fn load(spec: &str) -> Result<ToyScene, SceneError> {
        match spec {
            "two-blobs" => Ok(Self::two_blobs()),
            "box-and-sphere" => Ok(Self::box_and_sphere()),
            other if Path::new(other).exists() => Self::from_json_file(Path::new(other)),
            other => Err(SceneError::UnknownPreset(other.to_string())),
        }
    }

    /// Two solid-colored spheres on a gray background — small enough to
    /// train against in minutes on a CPU, asymmetric enough that every
    /// orbit angle looks different.
    pub fn two_blobs() -> ToyScene {
        ToyScene {
            primitives: vec![
                Primitive::Sphere {
                    center: [-0.6, 0.1, 0.3],
                    radius: 0.55,
                    color: [0.85, 0.25, 0.15],
                    density: 8.0,
                },
                Primitive::Sphere {
                    center: [0.7, -0.15, -0.3],
                    radius: 0.7,
                    color: [0.15, 0.35, 0.85],
                    density: 6.0,
                },
            ],
            background: [0.5, 0.5, 0.5],
            bounds_min: [-2.0, -2.0, -2.0],
            bounds_max: [2.0, 2.0, 2.0],
        }
    }

    pub fn box_and_sphere() -> ToyScene {
        ToyScene {
            primitives: vec![
                Primitive::Box {
                    min: [-1.0, -0.45, -0.45],
                    max: [-0.1, 0.45, 0.45],
                    color: [0.9, 0.8, 0.2],
                    density: 7.0,
                },
                Primitive::Sphere {
                    center: [0.75, 0.0, 0.1],
                    radius: 0.5,
                    color: [0.2, 0.8, 0.5],
                    density: 7.0,
                },
            ],
            background: [0.35, 0.35, 0.35],
            bounds_min: [-2.0, -2.0, -2.0],
            bounds_max: [2.0, 2.0, 2.0],
        }
    }
}

impl RadianceField for ToyScene {
    fn eval(&self, x: &Vector3<f64>, _d: &Vector3<f64>) -> FieldOutput {
        let (sigma, color) = ToyScene::eval(self, x);
        FieldOutput { sigma, color }
    }
}

/// Ground-truth render: the scene goes through the exact same compositing
/// path as the learned field, always against its own background color
/// (whatever `cfg.background` says — the background belongs to the scene).
pub fn render_ground_truth(
    scene: &ToyScene,
    k: &CameraIntrinsics,
    pose: &Pose,
    cfg: &RenderConfig,
) -> Image {
    let cfg = RenderConfig { background: scene.background, ..*cfg };
    render_image(scene, k, pose, &cfg)
}

/// Evenly spaced frame times covering `[0, period]` inclusive — a closed
/// loop when the trajectory is periodic.
pub fn frame_times(n_frames: usize, period_s: f64) -> Vec<f64> {
    assert!(n_frames >= 2, "need at least two frames");
    assert!(period_s > 0.0);
    (0..n_frames).map(|k| k as f64 * period_s / (n_frames - 1) as f64).collect()
}

/// Renders the trajectory at the given times and maps each pixel to the log
/// intensity of its own Bayer channel — the signal an event sensor watches.
pub fn sensor_log_frames<F: RadianceField + ?Sized>(
    field: &F,
    k: &CameraIntrinsics,
    trajectory: &dyn Trajectory,
    times_s: &[f64],
    cfg: &RenderConfig,
    pattern: BayerPattern,
) -> Result<Vec<LogFrame>, GeometryError> {
    times_s
        .iter()
        .map(|&t| {
            let pose = trajectory.pose_at(t)?;
            let img = render_image(field, k, &pose, cfg);
            let values = (0..k.height)
                .flat_map(|y| (0..k.width).map(move |x| (x, y)))
                .map(|(x, y)| {
                    let ch = bayer_channel(x, y, pattern);
                    log_intensity(channel_intensity(&img.get(x, y), ch), cfg.eps_log)
                })
                .collect();
            Ok(LogFrame { t_us: (t * 1e6).round() as u64, values })
        })
        .collect()
}
