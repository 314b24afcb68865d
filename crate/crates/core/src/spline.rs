//! Uniform B-spline ground surface, its contact constraints, and the
//! least-squares control-point fit.
//!
//! Control point `(i, j)` sits on an integer lattice; patch `(gx, gy)` covers
//! `[x0 + gx d, x0 + (gx + 1) d) x [y0 + gy d, y0 + (gy + 1) d)`. Within a
//! patch the local net is stored column-major: entry `i + k j` is the point
//! `i` steps along x and `j` steps along y from the patch's first lattice
//! index.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x6, RowDVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::attitude::{
    check_tilt, rotation_unchecked, tilt_matrix, tilt_matrix_derivatives, yaw_matrix,
    yaw_matrix_derivative, Pose,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplineDegree {
    Linear,
    Quadratic,
    Cubic,
}

const CUBIC: [[f64; 4]; 4] = [
    [-1.0 / 6.0, 3.0 / 6.0, -3.0 / 6.0, 1.0 / 6.0],
    [3.0 / 6.0, -6.0 / 6.0, 3.0 / 6.0, 0.0],
    [-3.0 / 6.0, 0.0, 3.0 / 6.0, 0.0],
    [1.0 / 6.0, 4.0 / 6.0, 1.0 / 6.0, 0.0],
];
const QUADRATIC: [[f64; 4]; 4] = [
    [0.5, -1.0, 0.5, 0.0],
    [-1.0, 1.0, 0.0, 0.0],
    [0.5, 0.5, 0.0, 0.0],
    [0.0; 4],
];
const LINEAR: [[f64; 4]; 4] = [[-1.0, 1.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], [0.0; 4], [0.0; 4]];

impl SplineDegree {
    pub fn from_degree(degree: u32) -> Result<Self> {
        match degree {
            1 => Ok(Self::Linear),
            2 => Ok(Self::Quadratic),
            3 => Ok(Self::Cubic),
            other => Err(Error::Config(format!(
                "spline_degree must be 1, 2 or 3, got {other}"
            ))),
        }
    }

    pub fn degree(self) -> u32 {
        match self {
            Self::Linear => 1,
            Self::Quadratic => 2,
            Self::Cubic => 3,
        }
    }

    /// Control points per axis for one patch.
    pub fn order(self) -> usize {
        self.degree() as usize + 1
    }

    /// Lattice offset of a patch's first control point.
    pub fn offset(self) -> i64 {
        match self {
            Self::Linear => 0,
            Self::Quadratic | Self::Cubic => -1,
        }
    }

    /// Half-width, in patches, of the region a single patch's net touches.
    pub fn reach(self) -> i64 {
        self.degree() as i64
    }

    /// Power-basis coefficient matrix; rows are ordered from the highest
    /// power of `u` down to the constant.
    pub fn matrix(self) -> DMatrix<f64> {
        let k = self.order();
        let m = self.raw_matrix();
        DMatrix::from_fn(k, k, |r, c| m[r][c])
    }

    fn raw_matrix(self) -> &'static [[f64; 4]; 4] {
        match self {
            Self::Linear => &LINEAR,
            Self::Quadratic => &QUADRATIC,
            Self::Cubic => &CUBIC,
        }
    }

    /// Basis weights and their first two derivatives with respect to `u`.
    pub fn weights(self, u: f64) -> BasisWeights {
        let k = self.order();
        let m = self.raw_matrix();
        let mut pow = [0.0; 4];
        let mut dpow = [0.0; 4];
        let mut ddpow = [0.0; 4];
        // Row r holds u^(k-1-r).
        for r in 0..k {
            let e = (k - 1 - r) as i32;
            pow[r] = u.powi(e);
            if e >= 1 {
                dpow[r] = e as f64 * u.powi(e - 1);
            }
            if e >= 2 {
                ddpow[r] = (e * (e - 1)) as f64 * u.powi(e - 2);
            }
        }
        let mut out = BasisWeights {
            k,
            w: [0.0; 4],
            dw: [0.0; 4],
            ddw: [0.0; 4],
        };
        for c in 0..k {
            for r in 0..k {
                out.w[c] += pow[r] * m[r][c];
                out.dw[c] += dpow[r] * m[r][c];
                out.ddw[c] += ddpow[r] * m[r][c];
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BasisWeights {
    pub k: usize,
    pub w: [f64; 4],
    pub dw: [f64; 4],
    pub ddw: [f64; 4],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnotGrid {
    pub d: f64,
    pub x0: f64,
    pub y0: f64,
}

impl KnotGrid {
    pub fn new(d: f64, x0: f64, y0: f64) -> Self {
        assert!(d > 0.0, "knot interval must be positive");
        Self { d, x0, y0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchCoords {
    pub gx: i64,
    pub gy: i64,
    pub u: f64,
    pub v: f64,
}

impl PatchCoords {
    pub fn patch(&self) -> (i64, i64) {
        (self.gx, self.gy)
    }
}

fn split(t: f64) -> (i64, f64) {
    let g = t.floor();
    let u = t - g;
    if u >= 1.0 {
        (g as i64 + 1, 0.0)
    } else {
        (g as i64, u)
    }
}

pub fn patch_coords(grid: &KnotGrid, x: f64, y: f64) -> PatchCoords {
    let (gx, u) = split((x - grid.x0) / grid.d);
    let (gy, v) = split((y - grid.y0) / grid.d);
    PatchCoords { gx, gy, u, v }
}

/// Grid plus degree: everything needed to interpret a control net.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineShape {
    pub grid: KnotGrid,
    pub degree: SplineDegree,
}

impl SplineShape {
    pub fn new(grid: KnotGrid, degree: SplineDegree) -> Self {
        Self { grid, degree }
    }

    pub fn order(&self) -> usize {
        self.degree.order()
    }

    pub fn net_len(&self) -> usize {
        self.order() * self.order()
    }

    pub fn patch_of(&self, x: f64, y: f64) -> (i64, i64) {
        patch_coords(&self.grid, x, y).patch()
    }

    /// Lattice index of local net entry `idx` of patch `(gx, gy)`.
    pub fn lattice_of(&self, patch: (i64, i64), idx: usize) -> (i64, i64) {
        let k = self.order();
        let off = self.degree.offset();
        (
            patch.0 + off + (idx % k) as i64,
            patch.1 + off + (idx / k) as i64,
        )
    }

    /// Local index of a lattice point within patch `(gx, gy)`, if it belongs.
    pub fn local_index(&self, patch: (i64, i64), lattice: (i64, i64)) -> Option<usize> {
        let k = self.order() as i64;
        let off = self.degree.offset();
        let i = lattice.0 - patch.0 - off;
        let j = lattice.1 - patch.1 - off;
        if (0..k).contains(&i) && (0..k).contains(&j) {
            Some((i + k * j) as usize)
        } else {
            None
        }
    }

    /// Local coordinates of `(x, y)` measured from `patch`; may fall outside
    /// `[0, 1)` when the point lies in another patch.
    pub fn local_uv(&self, patch: (i64, i64), x: f64, y: f64) -> (f64, f64) {
        let g = &self.grid;
        (
            (x - g.x0) / g.d - patch.0 as f64,
            (y - g.y0) / g.d - patch.1 as f64,
        )
    }

    /// Kronecker rows of the net at `(x, y)`, relative to `patch`.
    pub fn rows(&self, patch: (i64, i64), x: f64, y: f64) -> BasisRows {
        let (u, v) = self.local_uv(patch, x, y);
        let k = self.order();
        let wx = self.degree.weights(u);
        let wy = self.degree.weights(v);
        let inv = 1.0 / self.grid.d;
        let n = k * k;
        let mut rows = BasisRows {
            value: vec![0.0; n],
            dx: vec![0.0; n],
            dy: vec![0.0; n],
            dxx: vec![0.0; n],
            dxy: vec![0.0; n],
            dyy: vec![0.0; n],
        };
        for j in 0..k {
            for i in 0..k {
                let idx = i + k * j;
                rows.value[idx] = wx.w[i] * wy.w[j];
                rows.dx[idx] = wx.dw[i] * wy.w[j] * inv;
                rows.dy[idx] = wx.w[i] * wy.dw[j] * inv;
                rows.dxx[idx] = wx.ddw[i] * wy.w[j] * inv * inv;
                rows.dxy[idx] = wx.dw[i] * wy.dw[j] * inv * inv;
                rows.dyy[idx] = wx.w[i] * wy.ddw[j] * inv * inv;
            }
        }
        rows
    }
}

/// Basis products for one evaluation point, in local net order.
#[derive(Clone, Debug)]
pub struct BasisRows {
    pub value: Vec<f64>,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    pub dxx: Vec<f64>,
    pub dxy: Vec<f64>,
    pub dyy: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl BasisRows {
    pub fn surface(&self, net: &[f64]) -> SurfacePoint {
        SurfacePoint {
            z: dot(&self.value, net),
            zx: dot(&self.dx, net),
            zy: dot(&self.dy, net),
            zxx: dot(&self.dxx, net),
            zxy: dot(&self.dxy, net),
            zyy: dot(&self.dyy, net),
        }
    }
}

/// Height and its partial derivatives up to second order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfacePoint {
    pub z: f64,
    pub zx: f64,
    pub zy: f64,
    pub zxx: f64,
    pub zxy: f64,
    pub zyy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlNet {
    pub patch: (i64, i64),
    /// Column-major heights, `k * k` entries.
    pub values: Vec<f64>,
}

impl ControlNet {
    pub fn constant(shape: &SplineShape, patch: (i64, i64), height: f64) -> Self {
        Self {
            patch,
            values: vec![height; shape.net_len()],
        }
    }

    /// `[u^3 u^2 u 1] B C B^T [v^3 v^2 v 1]^T`, with `C[i][j]` indexed by
    /// x then y.
    pub fn eval_matrix_form(&self, shape: &SplineShape, x: f64, y: f64) -> f64 {
        let k = shape.order();
        let (u, v) = shape.local_uv(self.patch, x, y);
        let b = shape.degree.matrix();
        let urow = RowDVector::from_fn(k, |_, c| u.powi((k - 1 - c) as i32));
        let vrow = RowDVector::from_fn(k, |_, c| v.powi((k - 1 - c) as i32));
        let c = DMatrix::from_column_slice(k, k, &self.values);
        (urow * &b * c * b.transpose() * vrow.transpose())[(0, 0)]
    }

    pub fn surface(&self, shape: &SplineShape, x: f64, y: f64) -> SurfacePoint {
        shape.rows(self.patch, x, y).surface(&self.values)
    }
}

/// Sparse lattice of control heights.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundSpline {
    pub shape: SplineShape,
    pub points: BTreeMap<(i64, i64), f64>,
}

impl GroundSpline {
    pub fn new(shape: SplineShape) -> Self {
        Self {
            shape,
            points: BTreeMap::new(),
        }
    }

    pub fn grid(&self) -> &KnotGrid {
        &self.shape.grid
    }

    pub fn set(&mut self, i: i64, j: i64, height: f64) {
        self.points.insert((i, j), height);
    }

    pub fn get(&self, i: i64, j: i64) -> Result<f64> {
        self.points
            .get(&(i, j))
            .copied()
            .ok_or(Error::MissingControlPoint { i, j })
    }

    pub fn net(&self, patch: (i64, i64)) -> Result<ControlNet> {
        let n = self.shape.net_len();
        let mut values = Vec::with_capacity(n);
        for idx in 0..n {
            let (i, j) = self.shape.lattice_of(patch, idx);
            values.push(self.get(i, j)?);
        }
        Ok(ControlNet { patch, values })
    }

    pub fn eval(&self, x: f64, y: f64) -> Result<SurfacePoint> {
        let patch = self.shape.patch_of(x, y);
        Ok(self.net(patch)?.surface(&self.shape, x, y))
    }

    pub fn eval_height(&self, x: f64, y: f64) -> Result<f64> {
        Ok(self.eval(x, y)?.z)
    }

    pub fn eval_gradient(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        let s = self.eval(x, y)?;
        Ok((s.zx, s.zy))
    }

    pub fn constraint_residual(&self, pose: &Pose, lever: &Vector3<f64>) -> Result<Vector3<f64>> {
        let pw = contact_point(pose, lever)?;
        let net = self.net(self.shape.patch_of(pw.x, pw.y))?;
        constraint_residual(&net, &self.shape, pose, lever)
    }
}

/// Wheel-contact point `p + R t`.
pub fn contact_point(pose: &Pose, lever: &Vector3<f64>) -> Result<Vector3<f64>> {
    check_tilt(&pose.tilt)?;
    Ok(pose.p + rotation_unchecked(pose.yaw, &pose.tilt) * lever)
}

/// Slope that the body z-axis implies along y and x:
/// `2 (s1 sin psi + s2 cos psi) / (1 - |s|^2)` and
/// `2 (s1 cos psi - s2 sin psi) / (1 - |s|^2)`.
pub fn tilt_slopes(pose: &Pose) -> (f64, f64) {
    let (sn, cs) = pose.yaw.sin_cos();
    let (s1, s2) = (pose.tilt.x, pose.tilt.y);
    let e = 1.0 - s1 * s1 - s2 * s2;
    (
        2.0 * (s1 * sn + s2 * cs) / e,
        2.0 * (s1 * cs - s2 * sn) / e,
    )
}

fn residual_from(surface: &SurfacePoint, zw: f64, pose: &Pose) -> Vector3<f64> {
    let (t1, t2) = tilt_slopes(pose);
    Vector3::new(surface.z - zw, surface.zy + t1, surface.zx + t2)
}

/// Height residual and the two normal-alignment residuals for a pose whose
/// contact point lies under `net`.
pub fn constraint_residual(
    net: &ControlNet,
    shape: &SplineShape,
    pose: &Pose,
    lever: &Vector3<f64>,
) -> Result<Vector3<f64>> {
    let pw = contact_point(pose, lever)?;
    Ok(residual_from(&net.surface(shape, pw.x, pw.y), pw.z, pose))
}

/// Same residual evaluated through the matrix form of the surface.
pub fn constraint_residual_matrix_form(
    net: &ControlNet,
    shape: &SplineShape,
    pose: &Pose,
    lever: &Vector3<f64>,
) -> Result<Vector3<f64>> {
    let pw = contact_point(pose, lever)?;
    let z = net.eval_matrix_form(shape, pw.x, pw.y);
    // Gradient through the matrix form with derivative power rows.
    let k = shape.order();
    let (u, v) = shape.local_uv(net.patch, pw.x, pw.y);
    let b = shape.degree.matrix();
    let pow = |t: f64| RowDVector::from_fn(k, |_, c| t.powi((k - 1 - c) as i32));
    let dpow = |t: f64| {
        RowDVector::from_fn(k, |_, c| {
            let e = (k - 1 - c) as i32;
            if e == 0 {
                0.0
            } else {
                e as f64 * t.powi(e - 1)
            }
        })
    };
    let c = DMatrix::from_column_slice(k, k, &net.values);
    let inner = &b * c * b.transpose();
    let zx = (dpow(u) * &inner * pow(v).transpose())[(0, 0)] / shape.grid.d;
    let zy = (pow(u) * &inner * dpow(v).transpose())[(0, 0)] / shape.grid.d;
    let surface = SurfacePoint {
        z,
        zx,
        zy,
        zxx: 0.0,
        zxy: 0.0,
        zyy: 0.0,
    };
    Ok(residual_from(&surface, pw.z, pose))
}

/// Height residual and the x/y components of `(R e3) x grad M`, where
/// `grad M = (zx, zy, -1)`.
pub fn constraint_residual_cross(
    net: &ControlNet,
    shape: &SplineShape,
    pose: &Pose,
    lever: &Vector3<f64>,
) -> Result<Vector3<f64>> {
    let pw = contact_point(pose, lever)?;
    let s = net.surface(shape, pw.x, pw.y);
    let a = rotation_unchecked(pose.yaw, &pose.tilt).column(2).into_owned();
    let cross = a.cross(&Vector3::new(s.zx, s.zy, -1.0));
    Ok(Vector3::new(s.z - pw.z, cross.x, cross.y))
}

/// Residual plus its partial derivatives with respect to the pose
/// `(p, psi, s1, s2)` and the local net.
#[derive(Clone, Debug)]
pub struct ConstraintJacobian {
    pub residual: Vector3<f64>,
    pub d_pose: Matrix3x6<f64>,
    /// `3 x k^2`.
    pub d_net: DMatrix<f64>,
}

pub fn constraint_jacobians(
    net: &ControlNet,
    shape: &SplineShape,
    pose: &Pose,
    lever: &Vector3<f64>,
) -> Result<ConstraintJacobian> {
    let pw = contact_point(pose, lever)?;
    let rows = shape.rows(net.patch, pw.x, pw.y);
    let s = rows.surface(&net.values);
    let residual = residual_from(&s, pw.z, pose);

    // d residual / d contact point.
    let j = Matrix3::new(s.zx, s.zy, -1.0, s.zxy, s.zyy, 0.0, s.zxx, s.zxy, 0.0);

    let (sn, cs) = pose.yaw.sin_cos();
    let (s1, s2) = (pose.tilt.x, pose.tilt.y);
    let e = 1.0 - s1 * s1 - s2 * s2;
    let (t1, t2) = tilt_slopes(pose);

    let rpsi = yaw_matrix(pose.yaw);
    let rphi = tilt_matrix(&pose.tilt);
    let [dphi1, dphi2] = tilt_matrix_derivatives(&pose.tilt);
    let dpw_dpsi = yaw_matrix_derivative(pose.yaw) * rphi * lever;
    let dpw_ds1 = rpsi * dphi1 * lever;
    let dpw_ds2 = rpsi * dphi2 * lever;

    let mut d_pose = Matrix3x6::zeros();
    d_pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    let col_psi = j * dpw_dpsi + Vector3::new(0.0, t2, -t1);
    let col_s1 = j * dpw_ds1
        + Vector3::new(
            0.0,
            2.0 * sn / e + t1 * 2.0 * s1 / e,
            2.0 * cs / e + t2 * 2.0 * s1 / e,
        );
    let col_s2 = j * dpw_ds2
        + Vector3::new(
            0.0,
            2.0 * cs / e + t1 * 2.0 * s2 / e,
            -2.0 * sn / e + t2 * 2.0 * s2 / e,
        );
    d_pose.set_column(3, &col_psi);
    d_pose.set_column(4, &col_s1);
    d_pose.set_column(5, &col_s2);

    let n = shape.net_len();
    let mut d_net = DMatrix::zeros(3, n);
    for idx in 0..n {
        d_net[(0, idx)] = rows.value[idx];
        d_net[(1, idx)] = rows.dy[idx];
        d_net[(2, idx)] = rows.dx[idx];
    }
    Ok(ConstraintJacobian {
        residual,
        d_pose,
        d_net,
    })
}

/// Result of [`ls_fit_control`].
#[derive(Clone, Debug)]
pub struct ControlFit {
    pub net: ControlNet,
    pub residual_norm: f64,
    pub poses_used: usize,
}

/// Number of ridge passes [`ls_fit_control`] applies.
pub const DEFAULT_RIDGE_PASSES: f64 = 1e6;

/// Stacks the constraint rows of every pose whose contact point lies in
/// `patch` and solves for the local net.
///
/// The system is rank-deficient with few poses, so it is solved by iterated
/// ridge regression (`lambda = 1e-6 d^2`) started from a flat net at the mean
/// contact height. Each pass re-centres the ridge on the previous estimate;
/// the passes are applied in closed form through the SVD of the stacked
/// system, giving filter factor `1 - (lambda / (sigma^2 + lambda))^passes`
/// per singular direction.
pub fn ls_fit_control(
    poses: &[Pose],
    lever: &Vector3<f64>,
    shape: &SplineShape,
    patch: (i64, i64),
) -> Result<ControlFit> {
    ls_fit_control_with(poses, lever, shape, patch, DEFAULT_RIDGE_PASSES)
}

pub fn ls_fit_control_with(
    poses: &[Pose],
    lever: &Vector3<f64>,
    shape: &SplineShape,
    patch: (i64, i64),
    passes: f64,
) -> Result<ControlFit> {
    const MIN_POSES: usize = 2;

    let mut a_rows: Vec<RowDVector<f64>> = Vec::new();
    let mut b = Vec::new();
    let mut heights = Vec::new();
    for pose in poses {
        let pw = contact_point(pose, lever)?;
        if shape.patch_of(pw.x, pw.y) != patch {
            continue;
        }
        let rows = shape.rows(patch, pw.x, pw.y);
        let (t1, t2) = tilt_slopes(pose);
        a_rows.push(RowDVector::from_row_slice(&rows.value));
        a_rows.push(RowDVector::from_row_slice(&rows.dy));
        a_rows.push(RowDVector::from_row_slice(&rows.dx));
        b.extend([pw.z, -t1, -t2]);
        heights.push(pw.z);
    }
    if heights.len() < MIN_POSES {
        return Err(Error::InsufficientPoses {
            required: MIN_POSES,
            got: heights.len(),
        });
    }
    let a = DMatrix::from_rows(&a_rows);
    let b = DVector::from_vec(b);
    let n = shape.net_len();
    let mean = heights.iter().sum::<f64>() / heights.len() as f64;
    let c0 = DVector::from_element(n, mean);

    let lambda = 1e-6 * shape.grid.d * shape.grid.d;
    let svd = a.clone().svd(true, true);
    let (u, vt) = (svd.u.as_ref().unwrap(), svd.v_t.as_ref().unwrap());
    let r0 = &b - &a * &c0;
    let mut coeffs = u.transpose() * r0;
    for (i, sigma) in svd.singular_values.iter().enumerate() {
        let s2 = sigma * sigma;
        coeffs[i] *= if s2 > 0.0 {
            (1.0 - (lambda / (s2 + lambda)).powf(passes)) / sigma
        } else {
            0.0
        };
    }
    let c = c0 + vt.transpose() * coeffs;
    let residual_norm = (&a * &c - &b).norm();
    Ok(ControlFit {
        net: ControlNet {
            patch,
            values: c.iter().copied().collect(),
        },
        residual_norm,
        poses_used: heights.len(),
    })
}

#[cfg(test)]
mod tests {
    use nalgebra::{Vector2, Vector6};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::attitude::tilt_from_normal;

    fn cubic(d: f64) -> SplineShape {
        SplineShape::new(KnotGrid::new(d, 0.0, 0.0), SplineDegree::Cubic)
    }

    fn random_spline(rng: &mut ChaCha8Rng, shape: SplineShape, n: i64, amp: f64) -> GroundSpline {
        let mut s = GroundSpline::new(shape);
        for i in -2..n + 3 {
            for j in -2..n + 3 {
                s.set(i, j, rng.random_range(-amp..amp));
            }
        }
        s
    }

    /// Uniform cubic B-spline kernel centred on 0 with support (-2, 2).
    fn cardinal(t: f64) -> f64 {
        let a = t.abs();
        if a < 1.0 {
            (4.0 - 6.0 * a * a + 3.0 * a * a * a) / 6.0
        } else if a < 2.0 {
            (2.0 - a).powi(3) / 6.0
        } else {
            0.0
        }
    }

    /// Direct double sum over every stored control point.
    fn double_sum(s: &GroundSpline, x: f64, y: f64) -> f64 {
        let g = s.grid();
        let tx = (x - g.x0) / g.d;
        let ty = (y - g.y0) / g.d;
        // Point (i, j) is centred at knot (i, j) for the cubic layout.
        s.points
            .iter()
            .map(|(&(i, j), &c)| c * cardinal(tx - i as f64) * cardinal(ty - j as f64))
            .sum()
    }

    #[test]
    fn patch_coords_examples() {
        let g = KnotGrid::new(5.0, 0.0, 0.0);
        assert_eq!(patch_coords(&g, 2.5, 0.0), PatchCoords { gx: 0, gy: 0, u: 0.5, v: 0.0 });
        let p = patch_coords(&g, 5.0, 1.0);
        assert_eq!((p.gx, p.u), (1, 0.0));
        let p = patch_coords(&g, -0.1, 1.0);
        assert_eq!(p.gx, -1);
        assert!((p.u - 0.98).abs() < 1e-12);
    }

    #[test]
    fn patch_coords_guard_rounding() {
        let g = KnotGrid::new(0.1, 0.0, 0.0);
        let x = -1e-18;
        let p = patch_coords(&g, x, 0.0);
        assert!(p.u >= 0.0 && p.u < 1.0);
    }

    #[test]
    fn basis_weights_sum_to_one_and_derivatives_match() {
        for deg in [SplineDegree::Linear, SplineDegree::Quadratic, SplineDegree::Cubic] {
            for u in [0.0, 0.13, 0.5, 0.77, 0.999] {
                let w = deg.weights(u);
                assert!((w.w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
                let h = 1e-6;
                let (wp, wm) = (deg.weights(u + h), deg.weights(u - h));
                for i in 0..w.k {
                    assert!(((wp.w[i] - wm.w[i]) / (2.0 * h) - w.dw[i]).abs() < 1e-8);
                    assert!(((wp.dw[i] - wm.dw[i]) / (2.0 * h) - w.ddw[i]).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn cubic_weights_closed_form() {
        let u: f64 = 0.3;
        let w = SplineDegree::Cubic.weights(u);
        let expect = [
            (1.0 - u).powi(3) / 6.0,
            (3.0 * u.powi(3) - 6.0 * u * u + 4.0) / 6.0,
            (-3.0 * u.powi(3) + 3.0 * u * u + 3.0 * u + 1.0) / 6.0,
            u.powi(3) / 6.0,
        ];
        for i in 0..4 {
            assert!((w.w[i] - expect[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_net_is_reproduced() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = cubic(5.0);
        let mut s = GroundSpline::new(shape);
        for i in -1..12 {
            for j in -1..12 {
                s.set(i, j, 3.0);
            }
        }
        for _ in 0..1000 {
            let (x, y) = (rng.random_range(0.0..50.0), rng.random_range(0.0..50.0));
            let p = s.eval(x, y).unwrap();
            assert!((p.z - 3.0).abs() < 1e-12);
            assert!(p.zx.abs() < 1e-12 && p.zy.abs() < 1e-12);
        }
    }

    #[test]
    fn missing_point_is_an_error() {
        let s = GroundSpline::new(cubic(5.0));
        assert!(matches!(s.eval_height(1.0, 1.0), Err(Error::MissingControlPoint { .. })));
    }

    #[test]
    fn matrix_form_matches_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = cubic(5.0);
        let s = random_spline(&mut rng, shape, 8, 2.0);
        for _ in 0..1000 {
            let (x, y) = (rng.random_range(0.0..40.0), rng.random_range(0.0..40.0));
            let net = s.net(shape.patch_of(x, y)).unwrap();
            let direct = double_sum(&s, x, y);
            assert!((net.eval_matrix_form(&shape, x, y) - direct).abs() < 1e-12);
            assert!((s.eval_height(x, y).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = cubic(5.0);
        let s = random_spline(&mut rng, shape, 8, 2.0);
        let h = 1e-5 * shape.grid.d;
        for _ in 0..500 {
            let (x, y) = (rng.random_range(1.0..39.0), rng.random_range(1.0..39.0));
            let (gx, gy) = s.eval_gradient(x, y).unwrap();
            let fx = (s.eval_height(x + h, y).unwrap() - s.eval_height(x - h, y).unwrap()) / (2.0 * h);
            let fy = (s.eval_height(x, y + h).unwrap() - s.eval_height(x, y - h).unwrap()) / (2.0 * h);
            assert!((gx - fx).abs() < 1e-7 && (gy - fy).abs() < 1e-7);
        }
    }

    #[test]
    fn continuity_across_knot_corner() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = cubic(5.0);
        let s = random_spline(&mut rng, shape, 6, 2.0);
        let (x, y) = (10.0, 15.0);
        let reference = s.eval(x, y).unwrap();
        for (px, py) in [(1, 2), (1, 3), (2, 2), (2, 3)] {
            let p = s.net((px, py)).unwrap().surface(&shape, x, y);
            assert!((p.z - reference.z).abs() < 1e-12);
            assert!((p.zx - reference.zx).abs() < 1e-10);
            assert!((p.zy - reference.zy).abs() < 1e-10);
            assert!((p.zxx - reference.zxx).abs() < 1e-8);
            assert!((p.zyy - reference.zyy).abs() < 1e-8);
        }
    }

    #[test]
    fn flat_level_contact_has_zero_residual() {
        let shape = cubic(5.0);
        let net = ControlNet::constant(&shape, (0, 0), 1.5);
        for yaw in [0.0, 1.0, -2.5] {
            let pose = Pose::new(Vector3::new(2.0, 3.0, 1.5), yaw, Vector2::zeros());
            let r = constraint_residual(&net, &shape, &pose, &Vector3::zeros()).unwrap();
            assert!(r.amax() < 1e-14);
            let c = constraint_residual_cross(&net, &shape, &pose, &Vector3::zeros()).unwrap();
            assert!(c.amax() < 1e-14);
        }
    }

    #[test]
    fn pitched_plane_alignment() {
        let shape = cubic(5.0);
        let slope = 10f64.to_radians().tan();
        // A linear function of x is reproduced exactly by the cubic basis
        // when the control heights are the plane sampled at the Greville
        // abscissae, which for the uniform cubic are the knots themselves.
        let mut s = GroundSpline::new(shape);
        for i in -1..4 {
            for j in -1..4 {
                s.set(i, j, slope * i as f64 * 5.0);
            }
        }
        let (x, y) = (2.0, 3.0);
        assert!((s.eval_height(x, y).unwrap() - slope * x).abs() < 1e-12);
        let n = Vector3::new(-slope, 0.0, 1.0);
        let tilt = tilt_from_normal(&n, 0.0).unwrap();
        assert!(tilt.y.abs() < 1e-15);
        let pose = Pose::new(Vector3::new(x, y, slope * x), 0.0, tilt);
        let r = s.constraint_residual(&pose, &Vector3::zeros()).unwrap();
        assert!(r.amax() < 1e-8, "{r}");
    }

    #[test]
    fn cross_form_is_scaled_simplified_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = cubic(5.0);
        let s = random_spline(&mut rng, shape, 4, 2.0);
        for _ in 0..1000 {
            let pose = Pose::new(
                Vector3::new(rng.random_range(1.0..19.0), rng.random_range(1.0..19.0), 0.3),
                rng.random_range(-3.0..3.0),
                Vector2::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)),
            );
            let net = s.net(shape.patch_of(pose.p.x, pose.p.y)).unwrap();
            let lever = Vector3::zeros();
            let h = constraint_residual(&net, &shape, &pose, &lever).unwrap();
            let c = constraint_residual_cross(&net, &shape, &pose, &lever).unwrap();
            let a3 = (1.0 - pose.tilt.norm_squared()) / (1.0 + pose.tilt.norm_squared());
            assert!((h.x - c.x).abs() < 1e-12);
            assert!((h.y + c.y / a3).abs() < 1e-9 * (1.0 + h.y.abs()));
            assert!((h.z - c.z / a3).abs() < 1e-9 * (1.0 + h.z.abs()));
        }
    }

    #[test]
    fn matrix_and_kronecker_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let shape = cubic(5.0);
        let s = random_spline(&mut rng, shape, 4, 2.0);
        for _ in 0..1000 {
            let pose = Pose::new(
                Vector3::new(rng.random_range(1.0..19.0), rng.random_range(1.0..19.0), 0.3),
                rng.random_range(-3.0..3.0),
                Vector2::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)),
            );
            let net = s.net(shape.patch_of(pose.p.x, pose.p.y)).unwrap();
            let lever = Vector3::new(0.1, -0.2, -0.3);
            let pw = contact_point(&pose, &lever).unwrap();
            let net = s.net(shape.patch_of(pw.x, pw.y)).unwrap_or(net);
            let a = constraint_residual(&net, &shape, &pose, &lever).unwrap();
            let b = constraint_residual_matrix_form(&net, &shape, &pose, &lever).unwrap();
            assert!((a - b).amax() < 1e-14 * (1.0 + a.amax()) * 10.0, "{}", (a - b).amax());
        }
    }

    fn fd_check(net: &ControlNet, shape: &SplineShape, pose: &Pose, lever: &Vector3<f64>) {
        let jac = constraint_jacobians(net, shape, pose, lever).unwrap();
        let x0 = Vector6::new(pose.p.x, pose.p.y, pose.p.z, pose.yaw, pose.tilt.x, pose.tilt.y);
        let at = |x: &Vector6<f64>| {
            let p = Pose::new(Vector3::new(x[0], x[1], x[2]), x[3], Vector2::new(x[4], x[5]));
            constraint_residual(net, shape, &p, lever).unwrap()
        };
        for c in 0..6 {
            let h = 1e-6;
            let mut xp = x0;
            let mut xm = x0;
            xp[c] += h;
            xm[c] -= h;
            let fd = (at(&xp) - at(&xm)) / (2.0 * h);
            for r in 0..3 {
                let a = jac.d_pose[(r, c)];
                assert!((a - fd[r]).abs() <= 1e-5 * a.abs().max(fd[r].abs()) + 1e-8, "({r},{c}) {a} vs {}", fd[r]);
            }
        }
        for c in 0..shape.net_len() {
            let h = 1e-4;
            let mut np = net.clone();
            let mut nm = net.clone();
            np.values[c] += h;
            nm.values[c] -= h;
            let fd = (constraint_residual(&np, shape, pose, lever).unwrap()
                - constraint_residual(&nm, shape, pose, lever).unwrap())
                / (2.0 * h);
            for r in 0..3 {
                assert!((jac.d_net[(r, c)] - fd[r]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn jacobians_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for deg in [SplineDegree::Cubic, SplineDegree::Quadratic, SplineDegree::Linear] {
            let shape = SplineShape::new(KnotGrid::new(5.0, 0.0, 0.0), deg);
            let s = random_spline(&mut rng, shape, 4, 2.0);
            for _ in 0..100 {
                let lever = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.0));
                let pose = Pose::new(
                    Vector3::new(rng.random_range(6.0..14.0), rng.random_range(6.0..14.0), 0.3),
                    rng.random_range(-3.0..3.0),
                    Vector2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
                );
                let pw = contact_point(&pose, &lever).unwrap();
                let net = s.net(shape.patch_of(pw.x, pw.y)).unwrap();
                fd_check(&net, &shape, &pose, &lever);
            }
        }
    }

    #[test]
    fn height_row_has_unit_sum_and_minus_one() {
        let shape = cubic(5.0);
        let net = ControlNet::constant(&shape, (0, 0), 0.0);
        let pose = Pose::new(Vector3::new(1.0, 2.0, 0.0), 0.4, Vector2::new(0.1, 0.0));
        let jac = constraint_jacobians(&net, &shape, &pose, &Vector3::zeros()).unwrap();
        assert!((jac.d_net.row(0).sum() - 1.0).abs() < 1e-15);
        assert_eq!(jac.d_pose[(0, 2)], -1.0);
    }

    #[test]
    fn fit_flat_ground() {
        let shape = cubic(5.0);
        let poses: Vec<Pose> = (0..8)
            .map(|i| Pose::new(Vector3::new(0.5 + 0.5 * i as f64, 2.0 + 0.1 * i as f64, 0.7), 0.2, Vector2::zeros()))
            .collect();
        let fit = ls_fit_control(&poses, &Vector3::zeros(), &shape, (0, 0)).unwrap();
        for p in &poses {
            assert!((fit.net.surface(&shape, p.p.x, p.p.y).z - 0.7).abs() < 1e-6);
        }
    }

    #[test]
    fn fit_needs_two_poses() {
        let shape = cubic(5.0);
        let one = [Pose::new(Vector3::new(1.0, 1.0, 0.0), 0.0, Vector2::zeros())];
        assert!(matches!(
            ls_fit_control(&one, &Vector3::zeros(), &shape, (0, 0)),
            Err(Error::InsufficientPoses { got: 1, .. })
        ));
    }

    /// Poses lying on a known net, with the tilt taken from the surface normal.
    pub(crate) fn poses_on(net: &ControlNet, shape: &SplineShape, pts: &[(f64, f64)], rng: &mut ChaCha8Rng) -> Vec<Pose> {
        pts.iter()
            .map(|&(x, y)| {
                let s = net.surface(shape, x, y);
                let yaw = rng.random_range(-3.0..3.0);
                let tilt = tilt_from_normal(&Vector3::new(-s.zx, -s.zy, 1.0), yaw).unwrap();
                Pose::new(Vector3::new(x, y, s.z), yaw, tilt)
            })
            .collect()
    }

    #[test]
    fn fit_recovers_known_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shape = cubic(5.0);
        let truth = ControlNet {
            patch: (2, -1),
            values: (0..16).map(|_| rng.random_range(-0.5..0.5)).collect(),
        };
        let pts: Vec<(f64, f64)> = (0..20)
            .map(|_| (10.0 + rng.random_range(0.0..5.0), -5.0 + rng.random_range(0.0..5.0)))
            .collect();
        let poses = poses_on(&truth, &shape, &pts, &mut rng);
        let fit = ls_fit_control(&poses, &Vector3::zeros(), &shape, (2, -1)).unwrap();
        assert!(fit.residual_norm < 1e-8, "{}", fit.residual_norm);
        for _ in 0..50 {
            let (x, y) = (10.0 + rng.random_range(0.0..5.0), -5.0 + rng.random_range(0.0..5.0));
            let a = fit.net.surface(&shape, x, y).z;
            let b = truth.surface(&shape, x, y).z;
            assert!((a - b).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn partition_of_unity(x in -100.0f64..100.0, y in -100.0f64..100.0, c in -10.0f64..10.0, d in 0.5f64..10.0) {
            let shape = SplineShape::new(KnotGrid::new(d, 0.3, -0.7), SplineDegree::Cubic);
            let patch = shape.patch_of(x, y);
            let net = ControlNet::constant(&shape, patch, c);
            prop_assert!((net.surface(&shape, x, y).z - c).abs() < 1e-12 * (1.0 + c.abs()));
        }

        #[test]
        fn patch_coords_reconstruct(x in -1e3f64..1e3, y in -1e3f64..1e3) {
            let g = KnotGrid::new(5.0, 1.0, -2.0);
            let p = patch_coords(&g, x, y);
            prop_assert!(p.u >= 0.0 && p.u < 1.0 && p.v >= 0.0 && p.v < 1.0);
            prop_assert!((g.x0 + (p.gx as f64 + p.u) * g.d - x).abs() < 1e-9);
            prop_assert!((g.y0 + (p.gy as f64 + p.v) * g.d - y).abs() < 1e-9);
        }
    }
}
