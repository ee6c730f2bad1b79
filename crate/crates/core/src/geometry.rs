//! Rigid-body poses, the `[t; q]` motion parametrisation and the pinhole camera.
//!
//! Poses are stored as a rotation matrix plus translation. [`MotionParams`]
//! carries the same information as a translation and a Rodrigues rotation
//! vector, which is the form the tracker optimises over.

use nalgebra::{Matrix2x3, Matrix3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Depth below which a point is treated as lying on or behind the camera plane.
pub const MIN_DEPTH: f64 = 1e-9;

/// Below this angle exp/log switch to their Taylor expansions.
const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point depth {0} is not positive")]
    NonPositiveDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Rigid transform `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), translation)
    }

    /// Builds a pose from a unit quaternion `(qx, qy, qz, qw)` and translation.
    pub fn from_quaternion(q: [f64; 4], translation: Vector3<f64>) -> Self {
        let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[3], q[0], q[1], q[2]));
        Self::new(*uq.to_rotation_matrix().matrix(), translation)
    }

    /// Returns the rotation as `(qx, qy, qz, qw)` with `qw >= 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let q = q.quaternion();
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.i, s * q.j, s * q.k, s * q.w]
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3::new(rt, -(rt * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Geodesic rotation angle of this pose, in radians.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    /// Largest deviation of `RᵀR` from identity and of `det R` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.rotation.transpose() * self.rotation - Matrix3::identity();
        gram.abs().max().max((self.rotation.determinant() - 1.0).abs())
    }

    /// Largest absolute entry difference to `other`.
    pub fn max_abs_diff(&self, other: &PoseSE3) -> f64 {
        (self.rotation - other.rotation)
            .abs()
            .max()
            .max((self.translation - other.translation).abs().max())
    }
}

/// Translation plus Rodrigues rotation vector (`θ = [tᵀ qᵀ]ᵀ`).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MotionParams {
    pub translation: Vector3<f64>,
    pub rotation_rodrigues: Vector3<f64>,
}

impl MotionParams {
    pub fn new(translation: Vector3<f64>, rotation_rodrigues: Vector3<f64>) -> Self {
        Self {
            translation,
            rotation_rodrigues,
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// Packs as `[tx, ty, tz, qx, qy, qz]`.
    pub fn as_array(&self) -> [f64; 6] {
        let t = self.translation;
        let q = self.rotation_rodrigues;
        [t.x, t.y, t.z, q.x, q.y, q.z]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(
            Vector3::new(v[0], v[1], v[2]),
            Vector3::new(v[3], v[4], v[5]),
        )
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.translation * s, self.rotation_rodrigues * s)
    }

    pub fn norm(&self) -> f64 {
        (self.translation.norm_squared() + self.rotation_rodrigues.norm_squared()).sqrt()
    }

    pub fn to_pose(&self) -> PoseSE3 {
        se3_exp(self)
    }

    pub fn from_pose(pose: &PoseSE3) -> Self {
        se3_log(pose)
    }
}

/// Maps motion parameters to a pose: `R = Rodrigues(q)`, translation passed through.
pub fn se3_exp(params: &MotionParams) -> PoseSE3 {
    PoseSE3::new(so3_exp(&params.rotation_rodrigues), params.translation)
}

/// Inverse of [`se3_exp`] for rotation angles below π.
pub fn se3_log(pose: &PoseSE3) -> MotionParams {
    MotionParams::new(pose.translation, so3_log(&pose.rotation))
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(w);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let vee = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if theta < SMALL_ANGLE {
        // θ/(2 sin θ) ≈ 1/2 + θ²/12
        return vee * (0.5 + theta * theta / 12.0);
    }
    if std::f64::consts::PI - theta < 1e-6 {
        // sin θ vanishes; recover the axis from the symmetric part.
        let b = (r + r.transpose()) * 0.5 - Matrix3::identity() * cos;
        let diag = Vector3::new(b[(0, 0)], b[(1, 1)], b[(2, 2)]);
        let i = diag.imax();
        let mut axis = b.column(i).into_owned();
        axis /= axis.norm();
        if axis.dot(&vee) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    vee * (theta / (2.0 * theta.sin()))
}

pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    so3_log(r).norm()
}

/// Right Jacobian of SO(3): maps the rate of a rotation vector `φ` to the
/// body angular velocity of `Exp(φ)`.
pub fn so3_right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    let (a, b) = if theta < 1e-5 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() - k * a + k * k * b
}

/// Left Jacobian of SO(3), `V(ω)` in the group exponential of a twist.
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    so3_right_jacobian(&-phi)
}

/// Group exponential of the twist `(v, ω)`: `(Exp(ω), V(ω) v)`.
pub fn se3_twist_exp(v: &Vector3<f64>, w: &Vector3<f64>) -> PoseSE3 {
    PoseSE3::new(so3_exp(w), so3_left_jacobian(w) * v)
}

/// Inverse of [`se3_twist_exp`] for rotation angles below π.
pub fn se3_twist_log(pose: &PoseSE3) -> (Vector3<f64>, Vector3<f64>) {
    let w = so3_log(&pose.rotation);
    let v = so3_left_jacobian(&w)
        .try_inverse()
        .expect("left Jacobian is invertible below π")
        * pose.translation;
    (v, w)
}

/// Distortion-free pinhole model; integer pixel coordinates are pixel centres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidIntrinsics(m.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be non-zero");
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad("cx must lie in [0, width)");
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("cy must lie in [0, height)");
        }
        Ok(())
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        project(p, self)
    }

    pub fn backproject(&self, uv: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>, GeometryError> {
        backproject(uv, depth, self)
    }

    /// Whether `uv` lies in the closed sampling domain `[0, w-1] × [0, h-1]`.
    pub fn contains(&self, uv: &Vector2<f64>) -> bool {
        uv.x >= 0.0
            && uv.y >= 0.0
            && uv.x <= (self.width - 1) as f64
            && uv.y <= (self.height - 1) as f64
    }

    /// Nearest integer pixel, if it lies on the sensor.
    pub fn pixel_of(&self, uv: &Vector2<f64>) -> Option<(usize, usize)> {
        let x = uv.x.round();
        let y = uv.y.round();
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        Some((x as usize, y as usize))
    }

    /// 2×3 Jacobian of [`project`] with respect to the camera-frame point.
    pub fn projection_jacobian(&self, p: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz2,
        )
    }
}

pub fn project(p: &Vector3<f64>, k: &CameraIntrinsics) -> Result<Vector2<f64>, GeometryError> {
    if !(p.z > MIN_DEPTH) {
        return Err(GeometryError::NonPositiveDepth(p.z));
    }
    Ok(Vector2::new(
        k.fx * p.x / p.z + k.cx,
        k.fy * p.y / p.z + k.cy,
    ))
}

pub fn backproject(
    uv: &Vector2<f64>,
    depth: f64,
    k: &CameraIntrinsics,
) -> Result<Vector3<f64>, GeometryError> {
    if !(depth > MIN_DEPTH) {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    Ok(Vector3::new(
        (uv.x - k.cx) / k.fx * depth,
        (uv.y - k.cy) / k.fy * depth,
        depth,
    ))
}
