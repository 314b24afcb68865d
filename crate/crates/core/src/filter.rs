//! Space-based sliding-window EKF.
//!
//! The state is the IMU state `(p, v, yaw, s)`, a list of pose clones taken
//! every `d_s` meters of travel, and, once initialized, the control net of
//! the patch the vehicle is driving through. The covariance is laid out in
//! that order: `9 + 6 * clones + k^2`.
//!
//! Clones and control points that leave the active patch are frozen into a
//! static store: they drop out of the state but still constrain the active
//! net through manifold rows until they fall outside the patch's region of
//! influence.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::attitude::{clamp_tilt, Pose};
use crate::corrector::{Corrector, CorrectorOutput, SampleWindow};
use crate::error::{Error, Result};
use crate::models::{
    process_jacobians, propagate_state, scale_increment_covariance, ImuInput, ImuState,
    MeasurementSample, WheelParams,
};
use crate::spline::{
    constraint_jacobians, contact_point, ls_fit_control_with, ControlNet, GroundSpline, KnotGrid,
    SplineDegree, SplineShape,
};

/// Chi-square 0.999 quantile with three degrees of freedom.
pub const CHI2_3DOF_999: f64 = 16.266_236_196_238_13;

/// Indices of `(p, yaw, s)` within the IMU state.
const CLONE_ROWS: [usize; 6] = [0, 1, 2, 6, 7, 8];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Knot interval.
    pub d_m: f64,
    /// Travel distance between clones.
    pub d_s: f64,
    /// Manifold pseudo-measurement variance for the height, y-slope and
    /// x-slope rows.
    pub sigma2_m: [f64; 3],
    pub window: usize,
    pub cadence: usize,
    pub init_var_imu: f64,
    pub init_var_control: f64,
    /// Wheel contact point in the IMU frame.
    pub lever: [f64; 3],
    pub degree: SplineDegree,
    pub manifold: bool,
    pub velocity_updates: bool,
    pub gate: bool,
    pub min_init_poses: usize,
    /// Ridge passes for the control-net fit at initialization.
    pub fit_passes: f64,
    /// Per-sample noise used before the first corrector output.
    pub sigma_accel: f64,
    pub sigma_gyro: f64,
    pub wheels: WheelParams,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            d_m: 5.0,
            d_s: 0.1,
            sigma2_m: [10.0; 3],
            window: 100,
            cadence: 20,
            init_var_imu: 1e-8,
            init_var_control: 1e-2,
            lever: [0.0; 3],
            degree: SplineDegree::Cubic,
            manifold: true,
            velocity_updates: true,
            gate: false,
            min_init_poses: 6,
            fit_passes: 1.0,
            sigma_accel: 0.05,
            sigma_gyro: 0.002,
            wheels: WheelParams::default(),
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_m > 0.0) || !(self.d_s > 0.0) {
            return Err(Error::Config("d_m and d_s must be positive".into()));
        }
        if self.d_s >= self.d_m {
            return Err(Error::Config(format!(
                "d_s ({}) must be smaller than d_m ({})",
                self.d_s, self.d_m
            )));
        }
        if self.window == 0 || self.cadence == 0 {
            return Err(Error::Config("window and cadence must be positive".into()));
        }
        if self.sigma2_m.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("sigma2_M must be positive".into()));
        }
        if !(self.init_var_imu > 0.0) || !(self.init_var_control > 0.0) {
            return Err(Error::Config("initial variances must be positive".into()));
        }
        Ok(())
    }

    pub fn shape(&self) -> SplineShape {
        SplineShape::new(KnotGrid::new(self.d_m, 0.0, 0.0), self.degree)
    }

    pub fn lever(&self) -> Vector3<f64> {
        Vector3::from(self.lever)
    }
}

/// Event counts reported alongside the estimate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub velocity_updates: usize,
    pub gated_updates: usize,
    pub manifold_updates: usize,
    pub manifold_rows: usize,
    pub skipped_rows: usize,
    pub slides: usize,
    pub deferred_inits: usize,
    pub eigen_clamps: usize,
    pub diagonal_clamps: usize,
    pub tilt_clamps: usize,
}

/// Control net currently in the state.
#[derive(Clone, Debug, PartialEq)]
pub struct ActiveNet {
    pub patch: (i64, i64),
    pub values: Vec<f64>,
}

/// Frozen poses and control points.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StaticStore {
    pub poses: Vec<Pose>,
    pub points: BTreeMap<(i64, i64), f64>,
}

#[derive(Clone, Debug)]
pub struct FilterState {
    pub imu: ImuState,
    pub clones: Vec<Pose>,
    pub control: Option<ActiveNet>,
    pub cov: DMatrix<f64>,
    pub active_patch: (i64, i64),
    pub statics: StaticStore,
    pub counters: Counters,
    pub config: FilterConfig,
    shape: SplineShape,
    travelled: f64,
}

/// One stacked pseudo-measurement row: sparse Jacobian and residual.
#[derive(Clone, Debug)]
struct Row {
    cols: Vec<(usize, f64)>,
    residual: f64,
    var: f64,
}

impl FilterState {
    /// Starts from a known pose and IMU-frame velocity.
    pub fn new(imu: ImuState, config: FilterConfig) -> Result<Self> {
        config.validate()?;
        let shape = config.shape();
        let contact = contact_point(&imu.pose(), &config.lever())?;
        Ok(Self {
            imu,
            clones: Vec::new(),
            control: None,
            cov: DMatrix::identity(9, 9) * config.init_var_imu,
            active_patch: shape.patch_of(contact.x, contact.y),
            statics: StaticStore::default(),
            counters: Counters::default(),
            shape,
            travelled: 0.0,
            config,
        })
    }

    pub fn shape(&self) -> &SplineShape {
        &self.shape
    }

    pub fn dim(&self) -> usize {
        9 + 6 * self.clones.len() + self.control.as_ref().map_or(0, |c| c.values.len())
    }

    fn clone_offset(&self, i: usize) -> usize {
        9 + 6 * i
    }

    fn control_offset(&self) -> usize {
        9 + 6 * self.clones.len()
    }

    pub fn contact(&self) -> Result<Vector3<f64>> {
        contact_point(&self.imu.pose(), &self.config.lever())
    }

    /// Full mean in covariance order.
    pub fn state_vector(&self) -> DVector<f64> {
        let mut x = Vec::with_capacity(self.dim());
        x.extend(self.imu.to_vector().iter());
        for c in &self.clones {
            x.extend([c.p.x, c.p.y, c.p.z, c.yaw, c.tilt.x, c.tilt.y]);
        }
        if let Some(net) = &self.control {
            x.extend(net.values.iter());
        }
        DVector::from_vec(x)
    }

    pub fn set_state_vector(&mut self, x: &DVector<f64>) {
        assert_eq!(x.len(), self.dim());
        self.imu = ImuState::from_vector(&x.fixed_rows::<9>(0).into_owned());
        for i in 0..self.clones.len() {
            let o = self.clone_offset(i);
            self.clones[i] = Pose::new(
                Vector3::new(x[o], x[o + 1], x[o + 2]),
                x[o + 3],
                Vector2::new(x[o + 4], x[o + 5]),
            );
        }
        let o = self.control_offset();
        if let Some(net) = &mut self.control {
            for (k, v) in net.values.iter_mut().enumerate() {
                *v = x[o + k];
            }
        }
    }

    fn check_finite(&self) -> Result<()> {
        if !self.imu.is_finite() || self.cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState);
        }
        Ok(())
    }

    /// Covariance propagation for the IMU block; clones and control points
    /// are static so only the IMU rows and columns change.
    fn propagate_inner(&mut self, u: &ImuInput, noise: &[f64; 6]) -> Result<()> {
        let (f, g) = process_jacobians(&self.imu, u)?;
        self.imu = propagate_state(&self.imu, u)?;
        let w = SMatrix::<f64, 6, 6>::from_diagonal(&SVector::<f64, 6>::from(*noise));
        let pii = self.cov.fixed_view::<9, 9>(0, 0).into_owned();
        let mut new_pii = f * pii * f.transpose() + g * w * g.transpose();
        new_pii = (new_pii + new_pii.transpose()) * 0.5;
        self.cov.fixed_view_mut::<9, 9>(0, 0).copy_from(&new_pii);
        let n = self.cov.nrows();
        if n > 9 {
            let pio = f * self.cov.view((0, 9), (9, n - 9));
            self.cov.view_mut((9, 0), (n - 9, 9)).copy_from(&pio.transpose());
            self.cov.view_mut((0, 9), (9, n - 9)).copy_from(&pio);
        }
        self.travelled += self.imu.v.norm() * u.dt;
        Ok(())
    }

    /// Propagation step: `P <- A P A^T + B W B^T` with identity on clones and
    /// control points. `noise` is the per-sample `(accel, gyro)` variance.
    pub fn step_propagate(&mut self, u: &ImuInput, noise: &[f64; 6]) -> Result<()> {
        self.propagate_inner(u, noise)?;
        self.floor_diagonal();
        self.check_finite()
    }

    /// Propagation plus cloning of the propagated `(p, yaw, s)`.
    pub fn step_augment(&mut self, u: &ImuInput, noise: &[f64; 6]) -> Result<()> {
        self.propagate_inner(u, noise)?;
        let n = self.cov.nrows();
        let at = self.control_offset();
        let mut idx: Vec<usize> = (0..at).collect();
        idx.extend(CLONE_ROWS);
        idx.extend(at..n);
        self.cov = select(&self.cov, &idx);
        self.clones.push(self.imu.pose());
        self.travelled = 0.0;
        self.floor_diagonal();
        self.check_finite()
    }

    pub fn distance_since_clone(&self) -> f64 {
        self.travelled
    }

    /// Corrected-velocity update; `H` selects the IMU-frame velocity.
    pub fn update_velocity(&mut self, out: &CorrectorOutput) -> Result<()> {
        for v in out.var_velocity.iter() {
            if !(*v > 0.0) {
                return Err(Error::NonPositiveCovariance { value: *v });
            }
        }
        let innovation = out.velocity - self.imu.v;
        if self.config.gate {
            let s = self.cov.fixed_view::<3, 3>(3, 3).into_owned()
                + Matrix3::from_diagonal(&out.var_velocity);
            let d2 = s
                .cholesky()
                .map(|c| innovation.dot(&c.solve(&innovation)))
                .unwrap_or(f64::INFINITY);
            if d2 > CHI2_3DOF_999 {
                return Err(Error::InnovationGated {
                    mahalanobis_sq: d2,
                    threshold: CHI2_3DOF_999,
                });
            }
        }
        let rows: Vec<Row> = (0..3)
            .map(|i| Row {
                cols: vec![(3 + i, 1.0)],
                residual: -innovation[i],
                var: out.var_velocity[i],
            })
            .collect();
        self.apply_update(&rows)?;
        self.counters.velocity_updates += 1;
        Ok(())
    }

    /// Joseph-form update with stacked sparse rows. `residual` is `h(x)`; the
    /// measurement is zero after moving the observed value into it.
    fn apply_update(&mut self, rows: &[Row]) -> Result<()> {
        if rows.is_empty() {
            return Ok(());
        }
        let n = self.cov.nrows();
        let m = rows.len();
        let mut pht = DMatrix::zeros(n, m);
        for (r, row) in rows.iter().enumerate() {
            let mut col = pht.column_mut(r);
            for &(c, h) in &row.cols {
                col.axpy(h, &self.cov.column(c), 1.0);
            }
        }
        let mut s = DMatrix::zeros(m, m);
        for (r, row) in rows.iter().enumerate() {
            for c2 in 0..m {
                s[(r, c2)] = row.cols.iter().map(|&(c, h)| h * pht[(c, c2)]).sum::<f64>();
            }
            s[(r, r)] += row.var;
        }
        let s = (&s + s.transpose()) * 0.5;
        let chol = s.clone().cholesky().ok_or(Error::NonFiniteState)?;
        // K = P H^T S^-1, computed as (S^-1 H P)^T.
        let k = chol.solve(&pht.transpose()).transpose();
        let y = DVector::from_iterator(m, rows.iter().map(|r| -r.residual));
        let dx = &k * &y;

        let kpht = &k * pht.transpose();
        let ksk = &k * (&s * k.transpose());
        let mut p = &self.cov - &kpht - kpht.transpose() + ksk;
        p = (&p + p.transpose()) * 0.5;
        self.cov = p;

        let x = self.state_vector() + dx;
        self.set_state_vector(&x);
        self.clamp_tilts();
        self.floor_diagonal();
        self.check_finite()
    }

    fn clamp_tilts(&mut self) {
        if clamp_tilt(&mut self.imu.tilt) {
            self.counters.tilt_clamps += 1;
        }
        for c in &mut self.clones {
            if clamp_tilt(&mut c.tilt) {
                self.counters.tilt_clamps += 1;
            }
        }
    }

    fn floor_diagonal(&mut self) {
        for i in 0..self.cov.nrows() {
            if self.cov[(i, i)] < 0.0 {
                self.cov[(i, i)] = 0.0;
                self.counters.diagonal_clamps += 1;
            }
        }
    }

    /// Clamps eigenvalues below `-1e-9` back to zero.
    fn floor_eigenvalues(&mut self) {
        let n = self.cov.nrows();
        let shifted = &self.cov + DMatrix::identity(n, n) * 1e-9;
        if shifted.cholesky().is_some() {
            return;
        }
        let eig = self.cov.clone().symmetric_eigen();
        let vals = eig.eigenvalues.map(|v| v.max(0.0));
        let p = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
        self.cov = (&p + p.transpose()) * 0.5;
        self.counters.eigen_clamps += 1;
    }

    /// Net values for `patch`, with the state column of each entry that is an
    /// active control point. `None` if any needed point is unknown.
    fn gather(&self, patch: (i64, i64)) -> Option<(ControlNet, Vec<Option<usize>>)> {
        let active = self.control.as_ref()?;
        let off = self.control_offset();
        let n = self.shape.net_len();
        let mut values = Vec::with_capacity(n);
        let mut cols = Vec::with_capacity(n);
        for idx in 0..n {
            let lattice = self.shape.lattice_of(patch, idx);
            if let Some(a) = self.shape.local_index(active.patch, lattice) {
                values.push(active.values[a]);
                cols.push(Some(off + a));
            } else {
                values.push(*self.statics.points.get(&lattice)?);
                cols.push(None);
            }
        }
        Some((ControlNet { patch, values }, cols))
    }

    /// Rows for every clone in the state and every static pose near the
    /// active patch. Static rows are returned separately.
    fn manifold_rows(&mut self) -> Result<(Vec<Row>, Vec<Row>)> {
        let lever = self.config.lever();
        let var = self.config.sigma2_m;
        let mut clone_rows = Vec::new();
        let mut static_rows = Vec::new();
        let mut skipped = 0;
        for (i, pose) in self.clones.iter().enumerate() {
            let pw = contact_point(pose, &lever)?;
            let Some((net, cols)) = self.gather(self.shape.patch_of(pw.x, pw.y)) else {
                skipped += 3;
                continue;
            };
            let jac = constraint_jacobians(&net, &self.shape, pose, &lever)?;
            let o = self.clone_offset(i);
            for r in 0..3 {
                let mut row: Vec<(usize, f64)> = (0..6).map(|c| (o + c, jac.d_pose[(r, c)])).collect();
                for (k, col) in cols.iter().enumerate() {
                    if let Some(c) = col {
                        row.push((*c, jac.d_net[(r, k)]));
                    }
                }
                clone_rows.push(Row {
                    cols: row,
                    residual: jac.residual[r],
                    var: var[r],
                });
            }
        }
        for pose in &self.statics.poses {
            let pw = contact_point(pose, &lever)?;
            let Some((net, cols)) = self.gather(self.shape.patch_of(pw.x, pw.y)) else {
                skipped += 3;
                continue;
            };
            if cols.iter().all(Option::is_none) {
                continue;
            }
            let jac = constraint_jacobians(&net, &self.shape, pose, &lever)?;
            for r in 0..3 {
                let row: Vec<(usize, f64)> = cols
                    .iter()
                    .enumerate()
                    .filter_map(|(k, c)| c.map(|c| (c, jac.d_net[(r, k)])))
                    .collect();
                static_rows.push(Row {
                    cols: row,
                    residual: jac.residual[r],
                    var: var[r],
                });
            }
        }
        self.counters.skipped_rows += skipped;
        Ok((clone_rows, static_rows))
    }

    /// Replaces whitened static rows by their triangular factor, which
    /// carries the same information about the active net.
    fn compress_static(&self, rows: Vec<Row>) -> Vec<Row> {
        let Some(active) = &self.control else {
            return rows;
        };
        let k2 = active.values.len();
        if rows.len() <= k2 {
            return rows;
        }
        let off = self.control_offset();
        let m = rows.len();
        let mut h = DMatrix::zeros(m, k2);
        let mut r = DVector::zeros(m);
        for (i, row) in rows.iter().enumerate() {
            let w = 1.0 / row.var.sqrt();
            for &(c, v) in &row.cols {
                h[(i, c - off)] += v * w;
            }
            r[i] = row.residual * w;
        }
        let qr = h.qr();
        let rr = qr.r();
        let qtr = qr.q().transpose() * r;
        (0..k2)
            .map(|i| Row {
                cols: (0..k2).map(|j| (off + j, rr[(i, j)])).filter(|(_, v)| *v != 0.0).collect(),
                residual: qtr[i],
                var: 1.0,
            })
            .collect()
    }

    /// Manifold pseudo-measurement update. A no-op until the control net has
    /// been initialized.
    pub fn update_manifold(&mut self) -> Result<()> {
        if self.control.is_none() {
            return Ok(());
        }
        let (mut rows, statics) = self.manifold_rows()?;
        let compressed = self.compress_static(statics);
        rows.extend(compressed);
        self.counters.manifold_rows += rows.len();
        self.apply_update(&rows)?;
        self.floor_eigenvalues();
        self.counters.manifold_updates += 1;
        Ok(())
    }

    /// Stacked manifold residual, uncompressed, in clone-then-static order.
    pub fn manifold_residual(&mut self) -> Result<DVector<f64>> {
        let (mut rows, statics) = self.manifold_rows()?;
        rows.extend(statics);
        Ok(DVector::from_iterator(rows.len(), rows.iter().map(|r| r.residual)))
    }

    /// Dense stacked manifold Jacobian matching [`Self::manifold_residual`].
    pub fn manifold_jacobian(&mut self) -> Result<DMatrix<f64>> {
        let (mut rows, statics) = self.manifold_rows()?;
        rows.extend(statics);
        let mut h = DMatrix::zeros(rows.len(), self.dim());
        for (i, row) in rows.iter().enumerate() {
            for &(c, v) in &row.cols {
                h[(i, c)] += v;
            }
        }
        Ok(h)
    }

    /// Fits the control net of the active patch from the clones inside it.
    pub fn init_control(&mut self) -> Result<()> {
        if self.control.is_some() {
            return Ok(());
        }
        let lever = self.config.lever();
        let patch = self.active_patch;
        let mut inside = Vec::new();
        for c in &self.clones {
            let pw = contact_point(c, &lever)?;
            if self.shape.patch_of(pw.x, pw.y) == patch {
                inside.push(*c);
            }
        }
        if inside.len() < self.config.min_init_poses {
            return Err(Error::InsufficientPoses {
                required: self.config.min_init_poses,
                got: inside.len(),
            });
        }
        let fit = ls_fit_control_with(&inside, &lever, &self.shape, patch, self.config.fit_passes)?;
        let k2 = fit.net.values.len();
        let n = self.cov.nrows();
        let mut p = DMatrix::zeros(n + k2, n + k2);
        p.view_mut((0, 0), (n, n)).copy_from(&self.cov);
        for i in 0..k2 {
            p[(n + i, n + i)] = self.config.init_var_control;
        }
        self.cov = p;
        self.control = Some(ActiveNet {
            patch,
            values: fit.net.values,
        });
        Ok(())
    }

    /// Moves the active patch to the one under the current contact point,
    /// freezing whatever no longer belongs to it.
    pub fn slide_and_marginalize(&mut self) -> Result<()> {
        let contact = self.contact()?;
        self.slide_to(self.shape.patch_of(contact.x, contact.y))
    }

    /// Slide to a given patch. The run loop uses the patch seen before the
    /// manifold update, which may pull the contact point back over the edge.
    pub fn slide_to(&mut self, new_patch: (i64, i64)) -> Result<()> {
        let old_patch = self.active_patch;
        if new_patch == old_patch {
            return Ok(());
        }
        let lever = self.config.lever();

        // Clones outside the new patch become static poses.
        let mut keep: Vec<usize> = (0..9).collect();
        let mut kept_clones = Vec::new();
        for (i, c) in self.clones.iter().enumerate() {
            let pw = contact_point(c, &lever)?;
            if self.shape.patch_of(pw.x, pw.y) == new_patch {
                let o = self.clone_offset(i);
                keep.extend(o..o + 6);
                kept_clones.push(*c);
            } else {
                self.statics.poses.push(*c);
            }
        }

        let mut entries: Vec<Source> = keep.iter().copied().map(Source::Keep).collect();
        let mut new_control = None;
        if let Some(active) = self.control.take() {
            let off = 9 + 6 * self.clones.len();
            let n = self.shape.net_len();
            let step = (
                (new_patch.0 - old_patch.0).signum(),
                (new_patch.1 - old_patch.1).signum(),
            );
            for idx in 0..n {
                let lattice = self.shape.lattice_of(old_patch, idx);
                if self.shape.local_index(new_patch, lattice).is_none() {
                    self.statics.points.insert(lattice, active.values[idx]);
                }
            }
            let mean = active.values.iter().sum::<f64>() / n as f64;
            let mut values = Vec::with_capacity(n);
            for idx in 0..n {
                let lattice = self.shape.lattice_of(new_patch, idx);
                if let Some(a) = self.shape.local_index(old_patch, lattice) {
                    values.push(active.values[a]);
                    entries.push(Source::Keep(off + a));
                } else if let Some(v) = self.statics.points.remove(&lattice) {
                    values.push(v);
                    entries.push(Source::Fresh);
                } else {
                    // Continue the surface from the point behind it. No pose
                    // has support on the incoming column yet (its basis
                    // weight vanishes at the patch edge), so the neighbour
                    // is the best available estimate.
                    let behind = (lattice.0 - step.0, lattice.1 - step.1);
                    match self.shape.local_index(old_patch, behind) {
                        Some(a) if step != (0, 0) => {
                            values.push(active.values[a]);
                            entries.push(Source::Derived(off + a));
                        }
                        _ => {
                            values.push(mean);
                            entries.push(Source::Fresh);
                        }
                    }
                }
            }
            new_control = Some(ActiveNet {
                patch: new_patch,
                values,
            });
        }

        self.cov = rebuild(&self.cov, &entries, self.config.init_var_control);
        self.clones = kept_clones;
        self.control = new_control;
        self.active_patch = new_patch;
        self.discard_far_statics()?;
        self.floor_eigenvalues();
        self.counters.slides += 1;
        Ok(())
    }

    /// Drops static items that can no longer reach the active patch.
    fn discard_far_statics(&mut self) -> Result<()> {
        let reach = self.shape.degree.reach();
        let (gx, gy) = self.active_patch;
        let lever = self.config.lever();
        let shape = self.shape;
        let mut poses = Vec::with_capacity(self.statics.poses.len());
        for p in &self.statics.poses {
            let pw = contact_point(p, &lever)?;
            let (px, py) = shape.patch_of(pw.x, pw.y);
            if (px - gx).abs() <= reach && (py - gy).abs() <= reach {
                poses.push(*p);
            }
        }
        self.statics.poses = poses;
        let off = shape.degree.offset();
        let k = shape.order() as i64;
        let lo = |g: i64| g - reach + off;
        let hi = |g: i64| g + reach + off + k - 1;
        self.statics
            .points
            .retain(|&(i, j), _| i >= lo(gx) && i <= hi(gx) && j >= lo(gy) && j <= hi(gy));
        Ok(())
    }

    /// Active net plus every frozen point, as a spline.
    pub fn spline(&self) -> GroundSpline {
        let mut s = GroundSpline::new(self.shape);
        for (&(i, j), &v) in &self.statics.points {
            s.set(i, j, v);
        }
        if let Some(active) = &self.control {
            for (idx, v) in active.values.iter().enumerate() {
                let (i, j) = self.shape.lattice_of(active.patch, idx);
                s.set(i, j, *v);
            }
        }
        s
    }
}

/// `P[idx, idx]`; indices may repeat.
fn select(p: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |r, c| p[(idx[r], idx[c])])
}

/// Where each entry of a rebuilt state comes from.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Source {
    Keep(usize),
    /// A copy of an existing entry plus independent noise.
    Derived(usize),
    /// Independent of everything else.
    Fresh,
}

/// Covariance of the rebuilt state; `Derived` and `Fresh` entries get `var`
/// added to their diagonal.
fn rebuild(p: &DMatrix<f64>, src: &[Source], var: f64) -> DMatrix<f64> {
    let origin = |s: Source| match s {
        Source::Keep(i) | Source::Derived(i) => Some(i),
        Source::Fresh => None,
    };
    DMatrix::from_fn(src.len(), src.len(), |r, c| {
        let base = match (origin(src[r]), origin(src[c])) {
            (Some(a), Some(b)) => p[(a, b)],
            _ => 0.0,
        };
        if r == c && !matches!(src[r], Source::Keep(_)) {
            base + var
        } else {
            base
        }
    })
}

/// One estimate per log sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub t: f64,
    pub state: ImuState,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub estimates: Vec<Estimate>,
    pub spline: GroundSpline,
    pub counters: Counters,
    /// Every corrector output, in order.
    pub corrections: Vec<CorrectorOutput>,
}

/// Runs the filter over a log.
///
/// Each sample's IMU reading drives the step to the next sample. A clone is
/// taken whenever the vehicle has travelled `d_s` since the last one. At the
/// corrector cadence the velocity update runs; otherwise, if the contact
/// point has left the active patch, the control net is initialized (first
/// time), the manifold update runs and the window slides.
pub fn run(
    log: &[MeasurementSample],
    corrector: &mut dyn Corrector,
    config: &FilterConfig,
    initial: ImuState,
) -> Result<RunOutput> {
    let mut st = FilterState::new(initial, config.clone())?;
    let wheel_to_imu = Matrix3::identity();
    let default_noise = [
        config.sigma_accel.powi(2),
        config.sigma_accel.powi(2),
        config.sigma_accel.powi(2),
        config.sigma_gyro.powi(2),
        config.sigma_gyro.powi(2),
        config.sigma_gyro.powi(2),
    ];
    let mut noise = default_noise;
    let mut bias_a = Vector3::zeros();
    let mut bias_g = Vector3::zeros();
    let mut estimates = Vec::with_capacity(log.len());
    let mut corrections = Vec::new();
    if let Some(first) = log.first() {
        estimates.push(Estimate {
            t: first.t,
            state: st.imu,
        });
    }
    for k in 1..log.len() {
        let prev = &log[k - 1];
        let dt = log[k].t - prev.t;
        let u = ImuInput {
            accel: prev.accel - bias_a,
            gyro: prev.gyro - bias_g,
            dt,
        };
        let result = (|| -> Result<()> {
            if config.manifold && st.distance_since_clone() >= config.d_s {
                st.step_augment(&u, &noise)?;
            } else {
                st.step_propagate(&u, &noise)?;
            }

            let n = config.window;
            let mut velocity_out = None;
            if k + 1 >= n && (k + 1 - n).is_multiple_of(config.cadence) {
                let window = SampleWindow::new(&log[k + 1 - n..=k], n)?;
                let raw = corrector.correct(&window)?;
                let out = CorrectorOutput::compose(&raw, &window, &config.wheels, &wheel_to_imu);
                bias_a = out.bias_accel;
                bias_g = out.bias_gyro;
                let (va, vg) = scale_increment_covariance(&out.var_v_inc, &out.var_q_inc, n, window.dt());
                noise = [va.x, va.y, va.z, vg.x, vg.y, vg.z];
                corrections.push(out);
                velocity_out = Some(out);
            }

            if let (true, Some(out)) = (config.velocity_updates, velocity_out) {
                match st.update_velocity(&out) {
                    Err(Error::InnovationGated { .. }) => st.counters.gated_updates += 1,
                    other => other?,
                }
            } else if config.manifold {
                let c = st.contact()?;
                let patch = st.shape().patch_of(c.x, c.y);
                if patch != st.active_patch {
                    if st.control.is_none() {
                        match st.init_control() {
                            Err(Error::InsufficientPoses { .. }) => st.counters.deferred_inits += 1,
                            other => other?,
                        }
                    }
                    st.update_manifold()?;
                    st.slide_to(patch)?;
                }
            }
            Ok(())
        })();
        result.map_err(|e| e.at_sample(k))?;
        estimates.push(Estimate {
            t: log[k].t,
            state: st.imu,
        });
    }
    Ok(RunOutput {
        estimates,
        spline: st.spline(),
        counters: st.counters,
        corrections,
    })
}
