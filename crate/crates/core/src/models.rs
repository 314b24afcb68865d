//! Wheel odometer geometry, IMU conventions and the discrete process model.
//!
//! State order is `(p, v, yaw, s1, s2)`: position in the gravity frame,
//! velocity in the IMU frame, then attitude. Accelerometer readings follow
//! `a_meas = R^T (a + g) + b_a + n_a` with `g = (0, 0, -9.8)`, so a resting
//! sensor reads `R^T g`.

use nalgebra::{Matrix3, SMatrix, SVector, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::attitude::{
    check_tilt, rotation_unchecked, skew, tilt_kinematics, tilt_matrix, tilt_matrix_derivatives,
    tilt_rate_matrix, yaw_matrix, yaw_matrix_derivative, Pose,
};
use crate::error::{Error, Result};

pub const GRAVITY_MAGNITUDE: f64 = 9.8;

pub fn gravity() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -GRAVITY_MAGNITUDE)
}

/// Largest step the forward-Euler propagation accepts.
pub const MAX_DT: f64 = 0.05;

pub type Matrix9 = SMatrix<f64, 9, 9>;
pub type Matrix9x6 = SMatrix<f64, 9, 6>;
pub type Vector9 = SVector<f64, 9>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WheelParams {
    pub r_left: f64,
    pub r_right: f64,
    pub wheelbase: f64,
}

impl Default for WheelParams {
    fn default() -> Self {
        Self {
            r_left: 0.3,
            r_right: 0.3,
            wheelbase: 0.6,
        }
    }
}

/// Forward speed and yaw rate of a differential-drive base.
pub fn wheel_body_velocity(w_left: f64, w_right: f64, params: &WheelParams) -> (f64, f64) {
    let l = w_left * params.r_left;
    let r = w_right * params.r_right;
    ((l + r) / 2.0, (r - l) / params.wheelbase)
}

/// Inverse of [`wheel_body_velocity`].
pub fn wheel_speeds_from_body(vx: f64, yaw_rate: f64, params: &WheelParams) -> (f64, f64) {
    let half = yaw_rate * params.wheelbase / 2.0;
    ((vx - half) / params.r_left, (vx + half) / params.r_right)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuState {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub yaw: f64,
    pub tilt: Vector2<f64>,
}

impl ImuState {
    pub fn pose(&self) -> Pose {
        Pose::new(self.p, self.yaw, self.tilt)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_unchecked(self.yaw, &self.tilt)
    }

    pub fn to_vector(&self) -> Vector9 {
        Vector9::from_column_slice(&[
            self.p.x, self.p.y, self.p.z, self.v.x, self.v.y, self.v.z, self.yaw, self.tilt.x,
            self.tilt.y,
        ])
    }

    pub fn from_vector(x: &Vector9) -> Self {
        Self {
            p: Vector3::new(x[0], x[1], x[2]),
            v: Vector3::new(x[3], x[4], x[5]),
            yaw: x[6],
            tilt: Vector2::new(x[7], x[8]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

/// Bias-corrected specific force and angular rate, both in the IMU frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuInput {
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
    pub dt: f64,
}

fn check_dt(dt: f64) -> Result<()> {
    if !(0.0..=MAX_DT).contains(&dt) {
        return Err(Error::InvalidTimeStep { dt, max: MAX_DT });
    }
    Ok(())
}

/// One forward-Euler step of the continuous model.
pub fn propagate_state(x: &ImuState, u: &ImuInput) -> Result<ImuState> {
    check_tilt(&x.tilt)?;
    check_dt(u.dt)?;
    let r = x.rotation();
    let dt = u.dt;
    let vdot = u.accel - r.transpose() * gravity() - u.gyro.cross(&x.v);
    let (yaw_rate, sdot) = tilt_kinematics(&x.tilt, &u.gyro);
    Ok(ImuState {
        p: x.p + r * x.v * dt,
        v: x.v + vdot * dt,
        yaw: x.yaw + yaw_rate * dt,
        tilt: x.tilt + sdot * dt,
    })
}

/// Jacobians of [`propagate_state`] with respect to the state and to the
/// input noise `(n_a, n_w)`, where the true input is the measured input minus
/// the noise.
pub fn process_jacobians(x: &ImuState, u: &ImuInput) -> Result<(Matrix9, Matrix9x6)> {
    check_tilt(&x.tilt)?;
    check_dt(u.dt)?;
    let dt = u.dt;
    let (s1, s2) = (x.tilt.x, x.tilt.y);
    let w = u.gyro;
    let rpsi = yaw_matrix(x.yaw);
    let rphi = tilt_matrix(&x.tilt);
    let [dphi1, dphi2] = tilt_matrix_derivatives(&x.tilt);
    let g = gravity();

    let mut f = Matrix9::identity();
    f.fixed_view_mut::<3, 3>(0, 3).copy_from(&(rpsi * rphi * dt));
    f.fixed_view_mut::<3, 1>(0, 6)
        .copy_from(&(yaw_matrix_derivative(x.yaw) * rphi * x.v * dt));
    f.fixed_view_mut::<3, 1>(0, 7).copy_from(&(rpsi * dphi1 * x.v * dt));
    f.fixed_view_mut::<3, 1>(0, 8).copy_from(&(rpsi * dphi2 * x.v * dt));

    f.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(Matrix3::identity() - skew(&w) * dt));
    f.fixed_view_mut::<3, 1>(3, 7)
        .copy_from(&(-dphi1.transpose() * g * dt));
    f.fixed_view_mut::<3, 1>(3, 8)
        .copy_from(&(-dphi2.transpose() * g * dt));

    f[(6, 7)] = -w.x * dt;
    f[(6, 8)] = -w.y * dt;

    let a = s1 * w.y - s2 * w.x;
    let b = s1 * w.x + s2 * w.y - w.z;
    f[(7, 7)] = 1.0 + a * dt;
    f[(7, 8)] = -b * dt;
    f[(8, 7)] = b * dt;
    f[(8, 8)] = 1.0 + a * dt;

    let mut fnz = Matrix9x6::zeros();
    fnz.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(-Matrix3::identity() * dt));
    fnz.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(-skew(&x.v) * dt));
    fnz[(6, 3)] = s1 * dt;
    fnz[(6, 4)] = s2 * dt;
    fnz[(6, 5)] = -dt;
    fnz.fixed_view_mut::<2, 3>(7, 3)
        .copy_from(&(-tilt_rate_matrix(&x.tilt) * dt));
    Ok((f, fnz))
}

/// Per-sample IMU noise variance from a window increment variance:
/// `Sigma_a^2 = Sigma_v^2 / (n dt^2)` and likewise for rotation.
pub fn scale_increment_covariance(
    var_v: &Vector3<f64>,
    var_q: &Vector3<f64>,
    n: usize,
    dt: f64,
) -> (Vector3<f64>, Vector3<f64>) {
    assert!(n >= 1 && dt > 0.0);
    let k = 1.0 / (n as f64 * dt * dt);
    (var_v * k, var_q * k)
}

/// One row of the sensor log: raw IMU readings and wheel angular rates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeasurementSample {
    pub t: f64,
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
    pub wheel_left: f64,
    pub wheel_right: f64,
}

impl MeasurementSample {
    pub fn imu(&self) -> ImuSample {
        ImuSample {
            accel: self.accel,
            gyro: self.gyro,
        }
    }
}

/// Raw IMU pair for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
}

/// Velocity increment in the gravity frame and relative rotation over a
/// window, integrated with forward Euler from bias-corrected samples.
/// `rotations[k]` is the IMU-to-gravity rotation at sample `k`.
pub fn integrate_increments(
    samples: &[ImuSample],
    dt: f64,
    bias_a: &Vector3<f64>,
    bias_g: &Vector3<f64>,
    rotations: &[Matrix3<f64>],
) -> Result<(Vector3<f64>, UnitQuaternion<f64>)> {
    if samples.is_empty() {
        return Err(Error::EmptyWindow);
    }
    if rotations.len() != samples.len() {
        return Err(Error::LengthMismatch {
            left: samples.len(),
            right: rotations.len(),
        });
    }
    let g = gravity();
    let mut dv = Vector3::zeros();
    let mut q = UnitQuaternion::identity();
    for (s, r) in samples.iter().zip(rotations) {
        let a = s.accel - bias_a;
        dv += r * (a - r.transpose() * g) * dt;
        let w = s.gyro - bias_g;
        let half = w * (0.5 * dt);
        let step = nalgebra::Quaternion::new(1.0, half.x, half.y, half.z);
        q = UnitQuaternion::new_normalize(q.quaternion() * step);
    }
    Ok((dv, q))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use super::*;

    fn random_state(rng: &mut ChaCha8Rng) -> ImuState {
        ImuState {
            p: Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0)),
            v: Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            yaw: rng.random_range(-3.0..3.0),
            tilt: Vector2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
        }
    }

    fn random_input(rng: &mut ChaCha8Rng) -> ImuInput {
        ImuInput {
            accel: Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-12.0..-8.0)),
            gyro: Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            dt: 0.01,
        }
    }

    #[test]
    fn wheel_examples() {
        let p = WheelParams { r_left: 0.3, r_right: 0.3, wheelbase: 0.5 };
        let (v, w) = wheel_body_velocity(2.0, 2.0, &p);
        assert!((v - 0.6).abs() < 1e-15 && w == 0.0);
        let p = WheelParams { r_left: 0.3, r_right: 0.3, wheelbase: 0.6 };
        let (v, w) = wheel_body_velocity(0.0, 2.0, &p);
        assert!((v - 0.3).abs() < 1e-15 && (w - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn wheel_round_trip(vx in -10.0f64..10.0, wz in -3.0f64..3.0, rl in 0.1f64..0.5, rr in 0.1f64..0.5, b in 0.2f64..2.0) {
            let p = WheelParams { r_left: rl, r_right: rr, wheelbase: b };
            let (l, r) = wheel_speeds_from_body(vx, wz, &p);
            let (v2, w2) = wheel_body_velocity(l, r, &p);
            prop_assert!((v2 - vx).abs() < 1e-12 && (w2 - wz).abs() < 1e-12);
        }

        #[test]
        fn scaling_is_linear_and_degree_minus_two(v in 1e-6f64..1.0, n in 1usize..500, dt in 1e-3f64..0.05, k in 0.5f64..3.0) {
            let (a, _) = scale_increment_covariance(&Vector3::repeat(v), &Vector3::zeros(), n, dt);
            let (b, _) = scale_increment_covariance(&Vector3::repeat(v * k), &Vector3::zeros(), n, dt);
            let (c, _) = scale_increment_covariance(&Vector3::repeat(v), &Vector3::zeros(), n, dt * k);
            prop_assert!((b.x - a.x * k).abs() <= 1e-12 * b.x);
            prop_assert!((c.x - a.x / (k * k)).abs() <= 1e-12 * a.x);
        }
    }

    #[test]
    fn rest_is_equilibrium() {
        let x = ImuState { p: Vector3::new(1.0, 2.0, 3.0), v: Vector3::zeros(), yaw: 0.7, tilt: Vector2::zeros() };
        let u = ImuInput { accel: x.rotation().transpose() * gravity(), gyro: Vector3::zeros(), dt: 0.01 };
        assert_eq!(propagate_state(&x, &u).unwrap(), x);
        let tilted = ImuState { tilt: Vector2::new(0.1, -0.2), ..x };
        let u = ImuInput { accel: tilted.rotation().transpose() * gravity(), ..u };
        let y = propagate_state(&tilted, &u).unwrap();
        assert!((y.to_vector() - tilted.to_vector()).amax() < 1e-15);
    }

    #[test]
    fn zero_dt_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_state(&mut rng);
        let u = ImuInput { dt: 0.0, ..random_input(&mut rng) };
        assert_eq!(propagate_state(&x, &u).unwrap(), x);
        let (f, n) = process_jacobians(&x, &u).unwrap();
        assert_eq!(f, Matrix9::identity());
        assert_eq!(n, Matrix9x6::zeros());
        assert!(propagate_state(&x, &ImuInput { dt: 0.06, ..u }).is_err());
    }

    #[test]
    fn circular_drive() {
        let (vx, wz) = (2.0, 0.5);
        let radius = vx / wz;
        let dt = 0.001;
        let mut x = ImuState { p: Vector3::zeros(), v: Vector3::new(vx, 0.0, 0.0), yaw: 0.0, tilt: Vector2::zeros() };
        let gyro = Vector3::new(0.0, 0.0, wz);
        let steps = (2.0 * std::f64::consts::PI / wz / dt).round() as usize;
        let mut max_dev: f64 = 0.0;
        for _ in 0..steps {
            let accel = x.rotation().transpose() * gravity() + gyro.cross(&x.v);
            x = propagate_state(&x, &ImuInput { accel, gyro, dt }).unwrap();
            let centre = Vector3::new(0.0, radius, 0.0);
            max_dev = max_dev.max(((x.p - centre).norm() - radius).abs());
        }
        // One revolution of Euler drift is a few times v dt.
        assert!(max_dev < 10.0 * vx * dt, "{max_dev}");
        assert!((x.v.norm() - vx).abs() < 1e-9);
    }

    #[test]
    fn speed_conserved_under_rotation() {
        let mut x = ImuState { p: Vector3::zeros(), v: Vector3::new(1.0, 0.5, -0.2), yaw: 0.0, tilt: Vector2::new(0.1, 0.0) };
        let gyro = Vector3::new(0.3, -0.2, 0.5);
        let dt = 0.01;
        let speed = x.v.norm();
        let accel = x.rotation().transpose() * gravity() + gyro.cross(&x.v);
        let y = propagate_state(&x, &ImuInput { accel, gyro, dt }).unwrap();
        // The forcing only cancels the rotation term; the Euler step changes
        // speed at second order.
        assert!((y.v.norm() - speed).abs() < 10.0 * dt * dt);
        x = y;
        assert!(x.is_finite());
    }

    #[test]
    fn jacobian_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_state(&mut rng);
        let u = random_input(&mut rng);
        let (f, n) = process_jacobians(&x, &u).unwrap();
        assert_eq!(f.fixed_view::<3, 3>(0, 3).into_owned(), x.rotation() * u.dt);
        assert_eq!(f[(6, 6)], 1.0);
        assert_eq!(f.fixed_view::<3, 1>(3, 6).into_owned(), Vector3::zeros());
        assert_eq!(f.fixed_view::<6, 3>(3, 0).into_owned(), SMatrix::<f64, 6, 3>::zeros());
        assert_eq!(n.fixed_view::<3, 6>(0, 0).into_owned(), SMatrix::<f64, 3, 6>::zeros());
    }

    pub(crate) fn fd_process(x: &ImuState, u: &ImuInput) -> (Matrix9, Matrix9x6) {
        let h = 1e-6;
        let x0 = x.to_vector();
        let mut f = Matrix9::zeros();
        for c in 0..9 {
            let mut xp = x0;
            let mut xm = x0;
            xp[c] += h;
            xm[c] -= h;
            let yp = propagate_state(&ImuState::from_vector(&xp), u).unwrap().to_vector();
            let ym = propagate_state(&ImuState::from_vector(&xm), u).unwrap().to_vector();
            f.set_column(c, &((yp - ym) / (2.0 * h)));
        }
        let mut n = Matrix9x6::zeros();
        for c in 0..6 {
            let perturb = |sign: f64| {
                let mut v = *u;
                if c < 3 {
                    v.accel[c] -= sign * h;
                } else {
                    v.gyro[c - 3] -= sign * h;
                }
                propagate_state(x, &v).unwrap().to_vector()
            };
            n.set_column(c, &((perturb(1.0) - perturb(-1.0)) / (2.0 * h)));
        }
        (f, n)
    }

    #[test]
    fn jacobians_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = random_state(&mut rng);
            let u = random_input(&mut rng);
            let (f, n) = process_jacobians(&x, &u).unwrap();
            let (ff, nf) = fd_process(&x, &u);
            for (a, b) in f.iter().zip(ff.iter()).chain(n.iter().zip(nf.iter())) {
                assert!((a - b).abs() <= 1e-5 * a.abs().max(b.abs()) + 1e-8, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn scaling_examples() {
        let (a, q) = scale_increment_covariance(&Vector3::repeat(2e-4), &Vector3::repeat(2e-4), 200, 0.01);
        assert!((a - Vector3::repeat(1e-2)).amax() < 1e-15);
        assert_eq!(a, q);
        let (a, _) = scale_increment_covariance(&Vector3::repeat(3e-6), &Vector3::zeros(), 1, 0.01);
        assert!((a.x - 3e-6 / 1e-4).abs() < 1e-15);
    }

    #[test]
    fn scaling_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, dt, sigma) = (100usize, 0.01, 0.3);
        let noise = Normal::new(0.0, sigma).unwrap();
        let windows = 10_000;
        let mut sum_sq = Vector3::zeros();
        for _ in 0..windows {
            let mut inc = Vector3::zeros();
            for _ in 0..n {
                inc += Vector3::from_fn(|_, _| noise.sample(&mut rng)) * dt;
            }
            sum_sq += inc.component_mul(&inc);
        }
        let empirical = sum_sq / windows as f64;
        let (recovered, _) = scale_increment_covariance(&empirical, &Vector3::zeros(), n, dt);
        for i in 0..3 {
            assert!((recovered[i] / (sigma * sigma) - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn increments_at_rest_and_constant_rate() {
        let r = Matrix3::identity();
        let rest = vec![ImuSample { accel: gravity(), gyro: Vector3::zeros() }; 50];
        let (dv, q) = integrate_increments(&rest, 0.01, &Vector3::zeros(), &Vector3::zeros(), &vec![r; 50]).unwrap();
        assert_eq!(dv, Vector3::zeros());
        assert_eq!(q, UnitQuaternion::identity());

        let rate = 0.8;
        for n in [100usize, 200] {
            let dt = 1.0 / n as f64;
            let spin = vec![ImuSample { accel: gravity(), gyro: Vector3::new(0.0, 0.0, rate) }; n];
            let (_, q) = integrate_increments(&spin, dt, &Vector3::zeros(), &Vector3::zeros(), &vec![r; n]).unwrap();
            let expected = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), rate);
            assert!(q.angle_to(&expected) < dt);
        }
        assert!(matches!(integrate_increments(&[], 0.01, &Vector3::zeros(), &Vector3::zeros(), &[]), Err(Error::EmptyWindow)));
    }

    #[test]
    fn bias_cancels_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Dyadic values keep the subtraction exact.
        let dyadic = |rng: &mut ChaCha8Rng| rng.random_range(-64i32..64) as f64 / 64.0;
        let ba = Vector3::new(0.03125, -0.015625, 0.0078125);
        let bg = Vector3::new(0.001953125, -0.0009765625, 0.00048828125);
        let mut clean = Vec::new();
        let mut biased = Vec::new();
        let mut rots = Vec::new();
        for _ in 0..100 {
            let a = Vector3::new(dyadic(&mut rng), dyadic(&mut rng), -9.75 + dyadic(&mut rng));
            let g = Vector3::new(dyadic(&mut rng), dyadic(&mut rng), dyadic(&mut rng)) * 0.25;
            clean.push(ImuSample { accel: a, gyro: g });
            biased.push(ImuSample { accel: a + ba, gyro: g + bg });
            rots.push(rotation_unchecked(rng.random_range(-3.0..3.0), &Vector2::new(0.1, 0.05)));
        }
        let z = Vector3::zeros();
        let a = integrate_increments(&clean, 0.01, &z, &z, &rots).unwrap();
        let b = integrate_increments(&biased, 0.01, &ba, &bg, &rots).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }
}
