//! Yaw-independent attitude: a yaw angle followed by a stereographic tilt.
//!
//! The rotation from the IMU frame to the gravity-aligned frame is written
//! `R = R_yaw(psi) * R_tilt(s)`, where `s = (s1, s2)` are stereographic
//! coordinates of the body z-axis. The body z-axis in the gravity frame
//! depends on the tilt only, which is what keeps velocity and tilt estimates
//! decoupled from yaw drift.

use nalgebra::{Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};

use crate::error::{Error, Result};

/// Width of the excluded band below `|s|^2 = 1`.
pub const TILT_EPS: f64 = 1e-3;

/// Largest tilt norm the filter keeps after an update.
pub fn tilt_clamp_radius() -> f64 {
    (1.0 - TILT_EPS).sqrt() * (1.0 - 1e-9)
}

/// Position in the gravity frame plus attitude; also the shape of a clone.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub p: Vector3<f64>,
    pub yaw: f64,
    pub tilt: Vector2<f64>,
}

impl Pose {
    pub fn new(p: Vector3<f64>, yaw: f64, tilt: Vector2<f64>) -> Self {
        Self { p, yaw, tilt }
    }

    pub fn attitude(&self) -> Attitude {
        Attitude::new(self.yaw, self.tilt)
    }

    pub fn rotation(&self) -> Result<Matrix3<f64>> {
        rotation_from_yaw_tilt(self.yaw, &self.tilt)
    }
}

/// Yaw plus tilt.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Attitude {
    pub yaw: f64,
    pub tilt: Vector2<f64>,
}

impl Attitude {
    pub fn new(yaw: f64, tilt: Vector2<f64>) -> Self {
        Self { yaw, tilt }
    }

    pub fn level(yaw: f64) -> Self {
        Self::new(yaw, Vector2::zeros())
    }

    pub fn rotation(&self) -> Result<Matrix3<f64>> {
        rotation_from_yaw_tilt(self.yaw, &self.tilt)
    }

    pub fn quaternion(&self) -> Result<UnitQuaternion<f64>> {
        Ok(UnitQuaternion::from_matrix(&self.rotation()?))
    }

    /// Recovers yaw and tilt from a rotation whose body z-axis points upward.
    pub fn from_rotation(r: &Matrix3<f64>) -> Result<Self> {
        let yaw = (r[(1, 0)] - r[(0, 1)]).atan2(r[(0, 0)] + r[(1, 1)]);
        let tilt = tilt_from_normal(&r.column(2).into_owned(), yaw)?;
        Ok(Self { yaw, tilt })
    }
}

pub fn yaw_matrix(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

pub fn yaw_matrix_derivative(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// Tilt rotation without the singularity check.
pub fn tilt_matrix(tilt: &Vector2<f64>) -> Matrix3<f64> {
    let (s1, s2) = (tilt.x, tilt.y);
    let d = 1.0 + s1 * s1 + s2 * s2;
    // The (0,1) and (1,0) entries are both -2 s1 s2 / d.
    Matrix3::new(
        1.0 - s1 * s1 + s2 * s2,
        -2.0 * s1 * s2,
        2.0 * s1,
        -2.0 * s1 * s2,
        1.0 + s1 * s1 - s2 * s2,
        2.0 * s2,
        -2.0 * s1,
        -2.0 * s2,
        1.0 - s1 * s1 - s2 * s2,
    ) / d
}

/// Partial derivatives of [`tilt_matrix`] with respect to `s1` and `s2`.
pub fn tilt_matrix_derivatives(tilt: &Vector2<f64>) -> [Matrix3<f64>; 2] {
    let (s1, s2) = (tilt.x, tilt.y);
    let d = 1.0 + s1 * s1 + s2 * s2;
    let numer = tilt_matrix(tilt) * d;
    let dn1 = Matrix3::new(
        -2.0 * s1,
        -2.0 * s2,
        2.0,
        -2.0 * s2,
        2.0 * s1,
        0.0,
        -2.0,
        0.0,
        -2.0 * s1,
    );
    let dn2 = Matrix3::new(
        2.0 * s2,
        -2.0 * s1,
        0.0,
        -2.0 * s1,
        -2.0 * s2,
        2.0,
        0.0,
        -2.0,
        -2.0 * s2,
    );
    let d2 = d * d;
    [
        dn1 / d - numer * (2.0 * s1 / d2),
        dn2 / d - numer * (2.0 * s2 / d2),
    ]
}

pub fn check_tilt(tilt: &Vector2<f64>) -> Result<()> {
    let norm_sq = tilt.norm_squared();
    if !norm_sq.is_finite() || norm_sq >= 1.0 - TILT_EPS {
        return Err(Error::TiltSingularity {
            s1: tilt.x,
            s2: tilt.y,
            norm_sq,
        });
    }
    Ok(())
}

/// Pulls the tilt back inside the clamp radius. Returns true if it moved.
pub fn clamp_tilt(tilt: &mut Vector2<f64>) -> bool {
    let r = tilt.norm();
    let max = tilt_clamp_radius();
    if r > max {
        *tilt *= max / r;
        true
    } else {
        false
    }
}

pub fn rotation_unchecked(yaw: f64, tilt: &Vector2<f64>) -> Matrix3<f64> {
    yaw_matrix(yaw) * tilt_matrix(tilt)
}

pub fn rotation_from_yaw_tilt(yaw: f64, tilt: &Vector2<f64>) -> Result<Matrix3<f64>> {
    check_tilt(tilt)?;
    Ok(rotation_unchecked(yaw, tilt))
}

/// `M(s)` such that `ds/dt = M(s) * omega`.
pub fn tilt_rate_matrix(tilt: &Vector2<f64>) -> Matrix2x3<f64> {
    let (s1, s2) = (tilt.x, tilt.y);
    Matrix2x3::new(
        -2.0 * s1 * s2,
        s1 * s1 - s2 * s2 + 1.0,
        2.0 * s2,
        s1 * s1 - s2 * s2 - 1.0,
        2.0 * s1 * s2,
        -2.0 * s1,
    ) * 0.5
}

/// Yaw rate and tilt rate for a body angular velocity.
pub fn tilt_kinematics(tilt: &Vector2<f64>, omega: &Vector3<f64>) -> (f64, Vector2<f64>) {
    let yaw_rate = -tilt.x * omega.x - tilt.y * omega.y + omega.z;
    (yaw_rate, tilt_rate_matrix(tilt) * omega)
}

/// Tilt whose body z-axis, under the given yaw, is parallel to `normal`.
pub fn tilt_from_normal(normal: &Vector3<f64>, yaw: f64) -> Result<Vector2<f64>> {
    let norm = normal.norm();
    if !(norm > 0.0) || normal.z / norm <= 1e-9 {
        return Err(Error::DegenerateNormal {
            x: normal.x,
            y: normal.y,
            z: normal.z,
        });
    }
    let m = yaw_matrix(yaw).transpose() * (normal / norm);
    Ok(Vector2::new(m.x, m.y) / (1.0 + m.z))
}

/// Rotation vector of a unit quaternion, angle in `[0, pi]`.
pub fn quat_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let (mut w, mut v) = (q.w, q.imag());
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let n = v.norm();
    if n == 0.0 {
        return Vector3::zeros();
    }
    v * (2.0 * n.atan2(w) / n)
}

/// `Log(est^* (x) truth)`.
pub fn quat_log_error(est: &UnitQuaternion<f64>, truth: &UnitQuaternion<f64>) -> Vector3<f64> {
    quat_log(&quat_mul(&est.conjugate(), truth))
}

/// Product renormalized to unit length.
pub fn quat_mul(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let (aw, ax, ay, az) = (a.w, a.i, a.j, a.k);
    let (bw, bx, by, bz) = (b.w, b.i, b.j, b.k);
    UnitQuaternion::new_normalize(Quaternion::new(
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ))
}

pub fn quat_exp(rotation_vector: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*rotation_vector)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}
