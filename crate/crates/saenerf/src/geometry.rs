//! Cameras, poses, and trajectories.
//!
//! Convention throughout: camera frame is x right, y down, z forward
//! (looking along +z); `Pose` maps camera coordinates to world coordinates.
//! World up is +z. Pixel coordinates are continuous; the half-pixel center
//! offset is added inside [`pixel_ray`], so integer sensor coordinates
//! address pixel centers.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    /// Square camera with the field of view used by the toy orbits: focal
    /// length 0.8x the resolution, principal point at the center.
    pub fn for_resolution(res: u32) -> Self {
        let f = 0.8 * res as f64;
        let c = res as f64 / 2.0;
        CameraIntrinsics { fx: f, fy: f, cx: c, cy: c, width: res, height: res }
    }
}

/// Camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Camera forward axis (+z column) in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.column(2).into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit length.
    pub direction: Vector3<f64>,
}

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("pixel ({x}, {y}) outside sensor {width}x{height}")]
    PixelOutOfBounds { x: f64, y: f64, width: u32, height: u32 },
    #[error("degenerate look-at: eye and target coincide or view is parallel to world up")]
    DegenerateLookAt,
    #[error("orbit period must be positive, got {period}")]
    BadPeriod { period: f64 },
    #[error("trajectory has no keyframes")]
    EmptyTrajectory,
    #[error("keyframe times must increase strictly: t[{index}] = {t} after {prev}")]
    UnorderedKeyframes { index: usize, t: f64, prev: f64 },
    #[error("extrapolation refused: t = {t} outside keyframe range [{first}, {last}]")]
    ExtrapolationRefused { t: f64, first: f64, last: f64 },
    #[error("keyframe {index} rotation is not orthonormal (max deviation {deviation:e})")]
    NotARotation { index: usize, deviation: f64 },
}

/// Ray through pixel `u` (continuous coordinates; +0.5 pixel-center offset is
/// applied here). Direction is returned unit length in world coordinates.
pub fn pixel_ray(
    k: &CameraIntrinsics,
    pose: &Pose,
    u: (f64, f64),
) -> Result<Ray, GeometryError> {
    let (x, y) = u;
    if !(x >= 0.0 && x < k.width as f64 && y >= 0.0 && y < k.height as f64) {
        return Err(GeometryError::PixelOutOfBounds { x, y, width: k.width, height: k.height });
    }
    let dir_cam = Vector3::new((x + 0.5 - k.cx) / k.fx, (y + 0.5 - k.cy) / k.fy, 1.0);
    let dir_world = (pose.rotation * dir_cam).normalize();
    Ok(Ray { origin: pose.translation, direction: dir_world })
}

/// Camera-to-world rotation looking from `eye` toward `target`, world up +z.
/// Columns are (right, down, forward); right-handed, det +1.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Result<Matrix3<f64>, GeometryError> {
    let to_target = target - eye;
    if to_target.norm() < 1e-12 {
        return Err(GeometryError::DegenerateLookAt);
    }
    let forward = to_target.normalize();
    let up = Vector3::new(0.0, 0.0, 1.0);
    let right_raw = forward.cross(&up);
    if right_raw.norm() < 1e-9 {
        return Err(GeometryError::DegenerateLookAt);
    }
    let right = right_raw.normalize();
    let down = forward.cross(&right);
    Ok(Matrix3::from_columns(&[right, down, forward]))
}

/// Pose on a circular orbit of given radius at constant height, one
/// revolution per `period`, always looking at `target`.
pub fn orbit_pose(
    t: f64,
    radius: f64,
    height: f64,
    period: f64,
    target: Vector3<f64>,
) -> Result<Pose, GeometryError> {
    if !(period > 0.0) {
        return Err(GeometryError::BadPeriod { period });
    }
    let angle = std::f64::consts::TAU * t / period;
    let eye = Vector3::new(radius * angle.cos(), radius * angle.sin(), height);
    Ok(Pose { rotation: look_at(eye, target)?, translation: eye })
}

#[derive(Debug, Clone, Copy)]
pub struct Keyframe {
    /// Seconds.
    pub t: f64,
    pub pose: Pose,
}

/// Shortest-arc spherical interpolation between two rotations, `u` in [0, 1].
/// Falls back to normalized linear interpolation when the arc is tiny.
pub fn slerp_rotation(a: &Matrix3<f64>, b: &Matrix3<f64>, u: f64) -> Matrix3<f64> {
    let qa = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*a));
    let qb = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*b));
    let mut qb = qb.into_inner();
    let qa = qa.into_inner();
    let mut dot = qa.dot(&qb);
    // Hemisphere correction: q and -q are the same rotation; take the near one.
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    let dot = dot.min(1.0);
    let theta = dot.acos();
    let q = if theta.sin() < 1e-9 {
        (qa * (1.0 - u) + qb * u).normalize()
    } else {
        let s = theta.sin();
        (qa * (((1.0 - u) * theta).sin() / s) + qb * ((u * theta).sin() / s)).normalize()
    };
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

/// Interpolates the enclosing keyframe pair: slerp on rotation, linear on
/// translation. `t` exactly at a keyframe returns that pose unchanged;
/// anything outside the keyframe range is refused.
pub fn interpolate_pose(keys: &[Keyframe], t: f64) -> Result<Pose, GeometryError> {
    if keys.is_empty() {
        return Err(GeometryError::EmptyTrajectory);
    }
    for i in 1..keys.len() {
        if !(keys[i].t > keys[i - 1].t) {
            return Err(GeometryError::UnorderedKeyframes {
                index: i,
                t: keys[i].t,
                prev: keys[i - 1].t,
            });
        }
    }
    let (first, last) = (keys[0].t, keys[keys.len() - 1].t);
    if t < first || t > last {
        return Err(GeometryError::ExtrapolationRefused { t, first, last });
    }
    // partition_point: number of keyframes with time <= t.
    let upper = keys.partition_point(|k| k.t <= t);
    if upper == 0 {
        return Ok(keys[0].pose);
    }
    if keys[upper - 1].t == t {
        return Ok(keys[upper - 1].pose);
    }
    let (ka, kb) = (&keys[upper - 1], &keys[upper]);
    let u = (t - ka.t) / (kb.t - ka.t);
    Ok(Pose {
        rotation: slerp_rotation(&ka.pose.rotation, &kb.pose.rotation, u),
        translation: ka.pose.translation * (1.0 - u) + kb.pose.translation * u,
    })
}

/// Source of camera poses over time.
pub trait Trajectory: Sync {
    fn pose_at(&self, t: f64) -> Result<Pose, GeometryError>;
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OrbitTrajectory {
    pub radius: f64,
    pub height: f64,
    pub period: f64,
    pub target: [f64; 3],
}

impl Trajectory for OrbitTrajectory {
    fn pose_at(&self, t: f64) -> Result<Pose, GeometryError> {
        orbit_pose(t, self.radius, self.height, self.period, Vector3::from(self.target))
    }
}

#[derive(Debug, Clone)]
pub struct KeyframeTrajectory {
    keys: Vec<Keyframe>,
}

/// On-disk form of one keyframe: camera-to-world rotation, row-major.
#[derive(Serialize, Deserialize)]
struct KeyframeRecord {
    t_seconds: f64,
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl KeyframeTrajectory {
    pub fn new(keys: Vec<Keyframe>) -> Result<Self, GeometryError> {
        if keys.is_empty() {
            return Err(GeometryError::EmptyTrajectory);
        }
        for i in 1..keys.len() {
            if !(keys[i].t > keys[i - 1].t) {
                return Err(GeometryError::UnorderedKeyframes {
                    index: i,
                    t: keys[i].t,
                    prev: keys[i - 1].t,
                });
            }
        }
        Ok(KeyframeTrajectory { keys })
    }

    pub fn keys(&self) -> &[Keyframe] {
        &self.keys
    }

    pub fn time_span(&self) -> (f64, f64) {
        (self.keys[0].t, self.keys[self.keys.len() - 1].t)
    }

    pub fn to_json(&self) -> String {
        let records: Vec<KeyframeRecord> = self
            .keys
            .iter()
            .map(|k| {
                let r = &k.pose.rotation;
                KeyframeRecord {
                    t_seconds: k.t,
                    rotation: [
                        r[(0, 0)],
                        r[(0, 1)],
                        r[(0, 2)],
                        r[(1, 0)],
                        r[(1, 1)],
                        r[(1, 2)],
                        r[(2, 0)],
                        r[(2, 1)],
                        r[(2, 2)],
                    ],
                    translation: [k.pose.translation.x, k.pose.translation.y, k.pose.translation.z],
                }
            })
            .collect();
        serde_json::to_string_pretty(&records).expect("keyframe records are plain numbers")
    }

    pub fn from_json(json: &str) -> Result<Self, TrajectoryParseError> {
        let records: Vec<KeyframeRecord> = serde_json::from_str(json)?;
        let keys = records
            .iter()
            .enumerate()
            .map(|(index, rec)| {
                let m = Matrix3::new(
                    rec.rotation[0],
                    rec.rotation[1],
                    rec.rotation[2],
                    rec.rotation[3],
                    rec.rotation[4],
                    rec.rotation[5],
                    rec.rotation[6],
                    rec.rotation[7],
                    rec.rotation[8],
                );
                let deviation = (m * m.transpose() - Matrix3::identity()).abs().max();
                if deviation > 1e-6 || (m.determinant() - 1.0).abs() > 1e-6 {
                    return Err(GeometryError::NotARotation { index, deviation });
                }
                Ok(Keyframe {
                    t: rec.t_seconds,
                    pose: Pose { rotation: m, translation: Vector3::from(rec.translation) },
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(KeyframeTrajectory::new(keys)?)
    }
}

#[derive(Debug, Error)]
pub enum TrajectoryParseError {
    #[error("trajectory JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl Trajectory for KeyframeTrajectory {
    fn pose_at(&self, t: f64) -> Result<Pose, GeometryError> {
        interpolate_pose(&self.keys, t)
    }
}
