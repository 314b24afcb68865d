//! Numerical self-checks: finite-difference Jacobians, increment-covariance
//! scaling by Monte Carlo, and agreement of the constraint forms.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, SMatrix, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attitude::{quat_log, rotation_unchecked, tilt_from_normal, Pose};
use crate::models::{
    integrate_increments, process_jacobians, propagate_state, scale_increment_covariance, ImuInput, ImuSample,
    ImuState, Matrix9, Matrix9x6, Vector9,
};
use crate::spline::{
    constraint_jacobians, constraint_residual, constraint_residual_cross, constraint_residual_matrix_form,
    ControlNet, GroundSpline, KnotGrid, SplineDegree, SplineShape,
};
use crate::{Error, Result};

pub const JACOBIAN_REL_TOL: f64 = 1e-5;
pub const JACOBIAN_ABS_TOL: f64 = 1e-8;
pub const COVARIANCE_TOL: f64 = 0.05;
pub const ZERO_THRESHOLD: f64 = 1e-10;
pub const FORM_TOL: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Jacobians,
    Covariance,
    Constraints,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Jacobians, Suite::Covariance, Suite::Constraints];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Jacobians => "jacobians",
            Suite::Covariance => "covariance",
            Suite::Constraints => "constraints",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite `{s}` (expected jacobians, covariance or constraints)")))
    }
}

/// Outcome of one check. `max_error` is relative except where noted by the
/// check name.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} cases={} max_err={:.3e} tol={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.max_error,
            self.tolerance
        )
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Vec<Check> {
    match suite {
        Suite::Jacobians => jacobians(seed, 100),
        Suite::Covariance => covariance(seed, 100, 0.01, 10_000),
        Suite::Constraints => constraints(seed, 10_000),
    }
}

/// Tracks the worst entry of analytic vs numeric matrices.
struct Compare {
    max_rel: f64,
    ok: bool,
    seen: bool,
}

impl Compare {
    fn new() -> Self {
        Self {
            max_rel: 0.0,
            ok: true,
            seen: false,
        }
    }

    fn entry(&mut self, analytic: f64, numeric: f64) {
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        if !(diff <= JACOBIAN_REL_TOL * scale + JACOBIAN_ABS_TOL) {
            self.ok = false;
        }
        // Entries near zero are judged by the absolute bound only.
        if scale > JACOBIAN_ABS_TOL / JACOBIAN_REL_TOL {
            self.max_rel = self.max_rel.max(diff / scale);
        }
        self.seen = true;
    }

    fn check(self, name: &str, cases: usize) -> Check {
        Check {
            name: name.into(),
            cases,
            max_error: self.max_rel,
            tolerance: JACOBIAN_REL_TOL,
            passed: self.ok && self.seen,
        }
    }
}

fn random_imu(rng: &mut ChaCha8Rng) -> ImuState {
    ImuState {
        p: Vector3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-2.0..2.0)),
        v: Vector3::new(rng.random_range(-8.0..8.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        yaw: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        tilt: Vector2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
    }
}

fn random_input(rng: &mut ChaCha8Rng) -> ImuInput {
    ImuInput {
        accel: Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-12.0..-7.0)),
        gyro: Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        dt: 0.01,
    }
}

fn fd_process(x: &ImuState, u: &ImuInput) -> Result<(Matrix9, Matrix9x6)> {
    let h = 1e-6;
    let x0 = x.to_vector();
    let mut f = Matrix9::zeros();
    for c in 0..9 {
        let mut xp = x0;
        let mut xm = x0;
        xp[c] += h;
        xm[c] -= h;
        let yp = propagate_state(&ImuState::from_vector(&xp), u)?.to_vector();
        let ym = propagate_state(&ImuState::from_vector(&xm), u)?.to_vector();
        f.set_column(c, &((yp - ym) / (2.0 * h)));
    }
    let mut n = Matrix9x6::zeros();
    for c in 0..6 {
        let perturb = |sign: f64| {
            let mut v = *u;
            // The true input is the measurement minus the noise.
            if c < 3 {
                v.accel[c] -= sign * h;
            } else {
                v.gyro[c - 3] -= sign * h;
            }
            propagate_state(x, &v).map(|s| s.to_vector())
        };
        n.set_column(c, &((perturb(1.0)? - perturb(-1.0)?) / (2.0 * h)));
    }
    Ok((f, n))
}

fn random_spline(rng: &mut ChaCha8Rng, shape: SplineShape, n: i64, amp: f64) -> GroundSpline {
    let mut s = GroundSpline::new(shape);
    for i in -3..n + 4 {
        for j in -3..n + 4 {
            s.set(i, j, rng.random_range(-amp..amp));
        }
    }
    s
}

fn pose_vector(p: &Pose) -> Vector6<f64> {
    Vector6::new(p.p.x, p.p.y, p.p.z, p.yaw, p.tilt.x, p.tilt.y)
}

fn pose_from(x: &Vector6<f64>) -> Pose {
    Pose::new(Vector3::new(x[0], x[1], x[2]), x[3], Vector2::new(x[4], x[5]))
}

/// `F_I`, `F_n`, `H_v`, `H_M1` (pose block) and `H_M2` (net block) against
/// central differences on `cases` seeded random states each.
pub fn jacobians(seed: u64, cases: usize) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fi = Compare::new();
    let mut fnz = Compare::new();
    let mut hv = Compare::new();
    for _ in 0..cases {
        let x = random_imu(&mut rng);
        let u = random_input(&mut rng);
        match (process_jacobians(&x, &u), fd_process(&x, &u)) {
            (Ok((f, n)), Ok((ff, nf))) => {
                f.iter().zip(ff.iter()).for_each(|(a, b)| fi.entry(*a, *b));
                n.iter().zip(nf.iter()).for_each(|(a, b)| fnz.entry(*a, *b));
            }
            _ => {
                fi.ok = false;
                fnz.ok = false;
            }
        }

        // The velocity measurement reads the IMU-frame velocity directly.
        let mut h = SMatrix::<f64, 3, 9>::zeros();
        h.fixed_view_mut::<3, 3>(0, 3).fill_with_identity();
        let x0 = x.to_vector();
        let step = 1e-6;
        for c in 0..9 {
            let mut xp: Vector9 = x0;
            let mut xm: Vector9 = x0;
            xp[c] += step;
            xm[c] -= step;
            let fd = (ImuState::from_vector(&xp).v - ImuState::from_vector(&xm).v) / (2.0 * step);
            for r in 0..3 {
                hv.entry(h[(r, c)], fd[r]);
            }
        }
    }

    let mut hm1 = Compare::new();
    let mut hm2 = Compare::new();
    let degrees = [SplineDegree::Cubic, SplineDegree::Quadratic, SplineDegree::Linear];
    for case in 0..cases {
        let shape = SplineShape::new(KnotGrid::new(5.0, 0.0, 0.0), degrees[case % 3]);
        let spline = random_spline(&mut rng, shape, 4, 1.5);
        let lever = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.0));
        let pose = Pose::new(
            Vector3::new(rng.random_range(6.0..14.0), rng.random_range(6.0..14.0), rng.random_range(-1.0..1.0)),
            rng.random_range(-3.0..3.0),
            Vector2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
        );
        let net = match crate::spline::contact_point(&pose, &lever).and_then(|pw| spline.net(shape.patch_of(pw.x, pw.y))) {
            Ok(n) => n,
            Err(_) => {
                hm1.ok = false;
                continue;
            }
        };
        let jac = match constraint_jacobians(&net, &shape, &pose, &lever) {
            Ok(j) => j,
            Err(_) => {
                hm1.ok = false;
                continue;
            }
        };
        let x0 = pose_vector(&pose);
        let step = 1e-6;
        for c in 0..6 {
            let mut xp = x0;
            let mut xm = x0;
            xp[c] += step;
            xm[c] -= step;
            let (Ok(rp), Ok(rm)) = (
                constraint_residual(&net, &shape, &pose_from(&xp), &lever),
                constraint_residual(&net, &shape, &pose_from(&xm), &lever),
            ) else {
                hm1.ok = false;
                continue;
            };
            let fd = (rp - rm) / (2.0 * step);
            for r in 0..3 {
                hm1.entry(jac.d_pose[(r, c)], fd[r]);
            }
        }
        let step = 1e-4;
        for c in 0..shape.net_len() {
            let mut np: ControlNet = net.clone();
            let mut nm = net.clone();
            np.values[c] += step;
            nm.values[c] -= step;
            let (Ok(rp), Ok(rm)) = (
                constraint_residual(&np, &shape, &pose, &lever),
                constraint_residual(&nm, &shape, &pose, &lever),
            ) else {
                hm2.ok = false;
                continue;
            };
            let fd = (rp - rm) / (2.0 * step);
            for r in 0..3 {
                hm2.entry(jac.d_net[(r, c)], fd[r]);
            }
        }
    }

    vec![
        fi.check("F_I", cases),
        fnz.check("F_n", cases),
        hv.check("H_v", cases),
        hm1.check("H_M1", cases),
        hm2.check("H_M2", cases),
    ]
}

/// Per-axis ratio of the empirical increment covariance over `windows`
/// windows of `n` noisy samples to `n dt^2 Sigma`, for velocity and rotation
/// increments. Also checks that [`scale_increment_covariance`] inverts the
/// relation.
pub fn covariance(seed: u64, n: usize, dt: f64, windows: usize) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma_a = Vector3::new(0.05, 0.1, 0.2);
    let sigma_g = Vector3::new(0.002, 0.005, 0.01);
    let dist = |s: f64| Normal::new(0.0, s).expect("finite sigma");
    let na = [dist(sigma_a.x), dist(sigma_a.y), dist(sigma_a.z)];
    let ng = [dist(sigma_g.x), dist(sigma_g.y), dist(sigma_g.z)];
    let g = crate::models::gravity();
    let rotations = vec![Matrix3::identity(); n];
    let mut samples = vec![
        ImuSample {
            accel: g,
            gyro: Vector3::zeros(),
        };
        n
    ];
    let mut sum_v = Vector3::zeros();
    let mut sum_q = Vector3::zeros();
    let mut failed = false;
    for _ in 0..windows {
        for s in samples.iter_mut() {
            s.accel = g + Vector3::from_fn(|i, _| na[i].sample(&mut rng));
            s.gyro = Vector3::from_fn(|i, _| ng[i].sample(&mut rng));
        }
        match integrate_increments(&samples, dt, &Vector3::zeros(), &Vector3::zeros(), &rotations) {
            Ok((dv, q)) => {
                let r = quat_log(&q);
                sum_v += dv.component_mul(&dv);
                sum_q += r.component_mul(&r);
            }
            Err(_) => failed = true,
        }
    }
    let m = windows as f64;
    let (emp_v, emp_q) = (sum_v / m, sum_q / m);
    let scale = n as f64 * dt * dt;
    let expect_v = sigma_a.component_mul(&sigma_a) * scale;
    let expect_q = sigma_g.component_mul(&sigma_g) * scale;
    let worst = |emp: &Vector3<f64>, expect: &Vector3<f64>| {
        (0..3).map(|i| (emp[i] / expect[i] - 1.0).abs()).fold(0.0, f64::max)
    };
    let (rec_a, rec_g) = scale_increment_covariance(&emp_v, &emp_q, n, dt);
    let recovered = worst(&rec_a, &sigma_a.component_mul(&sigma_a)).max(worst(&rec_g, &sigma_g.component_mul(&sigma_g)));
    let mk = |name: &str, err: f64| Check {
        name: name.into(),
        cases: windows,
        max_error: err,
        tolerance: COVARIANCE_TOL,
        passed: !failed && err < COVARIANCE_TOL,
    };
    vec![
        mk("velocity_increment", worst(&emp_v, &expect_v)),
        mk("rotation_increment", worst(&emp_q, &expect_q)),
        mk("per_sample_recovery", recovered),
    ]
}

/// Half the cases put the contact point on the surface with the body z-axis
/// along the normal, half perturb such a pose. Both residual forms must
/// vanish together, and the basis-row evaluation must match the matrix form.
pub fn constraints(seed: u64, cases: usize) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = SplineShape::new(KnotGrid::new(5.0, 0.0, 0.0), SplineDegree::Cubic);
    let spline = random_spline(&mut rng, shape, 6, 2.0);
    let mut agree = 0usize;
    let mut worst_mismatch: f64 = 0.0;
    let mut form_err: f64 = 0.0;
    let mut done = 0usize;
    let mut failed = false;
    while done < cases {
        let lever = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.5..0.0));
        let (x, y) = (rng.random_range(5.0..25.0), rng.random_range(5.0..25.0));
        let Ok(s) = spline.eval(x, y) else {
            failed = true;
            break;
        };
        if (s.zx * s.zx + s.zy * s.zy).sqrt() >= 2.0 {
            continue;
        }
        let yaw = rng.random_range(-3.0..3.0);
        let Ok(mut tilt) = tilt_from_normal(&Vector3::new(-s.zx, -s.zy, 1.0), yaw) else {
            continue;
        };
        let mut pw = Vector3::new(x, y, s.z);
        if done % 2 == 1 {
            let kind = rng.random_range(0..3);
            let eps = 10f64.powf(rng.random_range(-6.0..-1.0));
            match kind {
                0 => pw.z += eps,
                1 => tilt.x += eps,
                _ => tilt += Vector2::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)),
            }
        }
        if tilt.norm() >= 0.9 {
            continue;
        }
        let r = rotation_unchecked(yaw, &tilt);
        let pose = Pose::new(pw - r * lever, yaw, tilt);
        let patch = shape.patch_of(pw.x, pw.y);
        let Ok(net) = spline.net(patch) else {
            failed = true;
            break;
        };
        let (Ok(simple), Ok(cross), Ok(matrix)) = (
            constraint_residual(&net, &shape, &pose, &lever),
            constraint_residual_cross(&net, &shape, &pose, &lever),
            constraint_residual_matrix_form(&net, &shape, &pose, &lever),
        ) else {
            failed = true;
            break;
        };
        let (a, b) = (simple.norm(), cross.norm());
        if (a < ZERO_THRESHOLD) == (b < ZERO_THRESHOLD) {
            agree += 1;
        } else {
            worst_mismatch = worst_mismatch.max(a.max(b));
        }
        form_err = form_err.max((simple - matrix).amax());
        done += 1;
    }
    let disagree = done - agree;
    vec![
        Check {
            name: "zero_sets".into(),
            cases: done,
            max_error: worst_mismatch,
            tolerance: ZERO_THRESHOLD,
            passed: !failed && disagree == 0 && done == cases,
        },
        Check {
            name: "row_vs_matrix_form (abs)".into(),
            cases: done,
            max_error: form_err,
            tolerance: FORM_TOL,
            passed: !failed && form_err <= FORM_TOL,
        },
    ]
}

/// `R(psi, s)` orthogonality and determinant over random attitudes.
pub fn rotation_orthogonality(seed: u64, cases: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let yaw = rng.random_range(-10.0..10.0);
        let r = rng.random_range(0.0..0.999f64).sqrt();
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let tilt = Vector2::new(r * a.cos(), r * a.sin());
        let m = rotation_unchecked(yaw, &tilt);
        let ortho = (m.transpose() * m - Matrix3::identity()).amax();
        worst = worst.max(ortho).max((m.determinant() - 1.0).abs());
    }
    Check {
        name: "rotation_orthogonality (abs)".into(),
        cases,
        max_error: worst,
        tolerance: 1e-12,
        passed: worst <= 1e-12,
    }
}
