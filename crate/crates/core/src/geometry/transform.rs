//! Rigid transforms in SE(3).
//!
//! Rotations are unit quaternions stored as `(w, x, y, z)` with the Hamilton
//! product and active-rotation semantics: `apply(p) = R·p + t`.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Allowed deviation of a quaternion norm from one.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Rigid-body pose: rotation followed by translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    rotation: UnitQuaternion<f64>,
    translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds a transform from raw quaternion components, rejecting
    /// non-unit or non-finite input. The components are stored as given.
    pub fn from_wxyz(q: [f64; 4], translation: Vec3) -> Result<Self> {
        Ok(Self {
            rotation: checked_unit(q)?,
            translation: checked_vec(translation)?,
        })
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    /// Rotation about +z by `yaw` radians followed by `translation`.
    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        Self::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
            translation,
        )
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Quaternion components `(w, x, y, z)`.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// Heading about +z, in (−π, π].
    pub fn yaw(&self) -> f64 {
        yaw_of(&self.rotation)
    }

    /// `R·p + t` without input validation.
    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `R·p + t`, rejecting non-finite points.
    pub fn transform_point(&self, p: &Vec3) -> Result<Vec3> {
        let p = checked_vec(*p)?;
        Ok(self.apply(&p))
    }

    /// `self ∘ other`, i.e. `other` is applied first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let inv = self.rotation.inverse();
        RigidTransform {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    /// Encodes as `[tx, ty, tz, qw, qx, qy, qz]`.
    pub fn to_array7(&self) -> [f64; 7] {
        let [w, x, y, z] = self.wxyz();
        let t = self.translation;
        [t.x, t.y, t.z, w, x, y, z]
    }

    pub fn from_array7(v: [f64; 7]) -> Result<Self> {
        Self::from_wxyz([v[3], v[4], v[5], v[6]], Vec3::new(v[0], v[1], v[2]))
    }
}

impl std::ops::Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

/// Translation plus unit quaternion, the 7-number encoding of a
/// rectification transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SevenVector {
    pub t: [f64; 3],
    /// `(w, x, y, z)`
    pub q: [f64; 4],
}

impl SevenVector {
    pub fn identity() -> Self {
        Self::from(&RigidTransform::identity())
    }

    pub fn to_transform(&self) -> Result<RigidTransform> {
        RigidTransform::from_wxyz(self.q, Vec3::from(self.t))
    }

    pub fn quaternion(&self) -> Quaternion<f64> {
        let [w, x, y, z] = self.q;
        Quaternion::new(w, x, y, z)
    }
}

impl From<&RigidTransform> for SevenVector {
    fn from(tf: &RigidTransform) -> Self {
        let t = tf.translation();
        Self {
            t: [t.x, t.y, t.z],
            q: tf.wxyz(),
        }
    }
}

impl From<RigidTransform> for SevenVector {
    fn from(tf: RigidTransform) -> Self {
        Self::from(&tf)
    }
}

/// Blends two poses: linear in translation, shortest-arc spherical in
/// rotation. `alpha = 0` returns `a` and `alpha = 1` returns `b` exactly.
pub fn interpolate_pose(a: &RigidTransform, b: &RigidTransform, alpha: f64) -> Result<RigidTransform> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("interpolation weight {alpha} outside [0, 1]")));
    }
    if alpha == 0.0 {
        return Ok(*a);
    }
    if alpha == 1.0 {
        return Ok(*b);
    }
    let translation = a.translation * (1.0 - alpha) + b.translation * alpha;
    Ok(RigidTransform::new(slerp(&a.rotation, &b.rotation, alpha), translation))
}

fn slerp(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, alpha: f64) -> UnitQuaternion<f64> {
    let qa = a.coords;
    let mut qb = b.coords;
    let mut dot = qa.dot(&qb);
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    let blended = if dot > 1.0 - 1e-12 {
        qa * (1.0 - alpha) + qb * alpha
    } else {
        let theta = dot.min(1.0).acos();
        let s = theta.sin();
        qa * (((1.0 - alpha) * theta).sin() / s) + qb * ((alpha * theta).sin() / s)
    };
    UnitQuaternion::new_normalize(Quaternion::from(blended))
}

/// `‖Rot(q_a) − Rot(q_b)‖_F`, in `[0, 2√2]`; insensitive to the sign of
/// either quaternion.
pub fn rotation_frobenius_distance(q_a: &Quaternion<f64>, q_b: &Quaternion<f64>) -> Result<f64> {
    let ra = rotation_of(q_a)?;
    let rb = rotation_of(q_b)?;
    Ok((ra - rb).norm())
}

fn rotation_of(q: &Quaternion<f64>) -> Result<Matrix3<f64>> {
    let u = checked_unit([q.w, q.i, q.j, q.k])?;
    Ok(u.to_rotation_matrix().into_inner())
}

fn checked_unit(q: [f64; 4]) -> Result<UnitQuaternion<f64>> {
    if q.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("non-finite quaternion"));
    }
    let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
    let norm = quat.norm();
    if (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::invalid(format!("quaternion norm {norm} is not 1")));
    }
    Ok(UnitQuaternion::new_unchecked(quat))
}

fn checked_vec(v: Vec3) -> Result<Vec3> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(v)
    } else {
        Err(Error::invalid("non-finite vector"))
    }
}

pub(crate) fn yaw_of(q: &UnitQuaternion<f64>) -> f64 {
    let q = q.quaternion();
    let siny = 2.0 * (q.w * q.k + q.i * q.j);
    let cosy = 1.0 - 2.0 * (q.j * q.j + q.k * q.k);
    normalize_angle(siny.atan2(cosy))
}

/// Wraps an angle into (−π, π].
pub fn normalize_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut r = (a + PI).rem_euclid(TAU) - PI;
    if r <= -PI {
        r += TAU;
    }
    r
}

/// Rotation matrix to unit quaternion, re-orthonormalising nothing: the
/// input is assumed to be a proper rotation.
pub(crate) fn quaternion_from_matrix(m: &Matrix3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*m))
}
