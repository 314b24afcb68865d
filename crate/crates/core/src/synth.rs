//! Synthetic worlds: random ground surfaces, vehicle trajectories that stay
//! in contact with them, and noisy IMU and wheel logs.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attitude::{rotation_unchecked, tilt_from_normal, Pose};
use crate::error::{Error, Result};
use crate::models::{gravity, wheel_speeds_from_body, MeasurementSample, WheelParams};
use crate::spline::{GroundSpline, KnotGrid, SplineDegree, SplineShape};

/// Largest per-axis control-point difference divided by `d`. The gradient of
/// a uniform B-spline is a convex combination of these differences, so the
/// slope magnitude stays below `sqrt(2) * MAX_AXIS_SLOPE < 0.3`.
pub const MAX_AXIS_SLOPE: f64 = 0.2;

/// Square ground of side `extent` centred on the origin, with heights from a
/// seeded Gaussian field smoothed by `smoothness` box-filter passes and
/// scaled so the largest height is `amplitude`.
pub fn make_ground(seed: u64, extent: f64, d: f64, amplitude: f64, smoothness: u32) -> GroundSpline {
    assert!(extent >= 3.0 * d, "extent must cover at least three knot intervals");
    let shape = SplineShape::new(KnotGrid::new(d, 0.0, 0.0), SplineDegree::Cubic);
    let half = (extent / 2.0 / d).ceil() as i64 + 2;
    let n = (2 * half + 1) as usize;
    let idx = |i: usize, j: usize| i + n * j;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut field: Vec<f64> = (0..n * n).map(|_| normal.sample(&mut rng)).collect();
    for _ in 0..smoothness {
        let mut next = vec![0.0; n * n];
        for j in 0..n {
            for i in 0..n {
                let mut sum = 0.0;
                let mut count = 0.0;
                for dj in -1i64..=1 {
                    for di in -1i64..=1 {
                        let (ii, jj) = (i as i64 + di, j as i64 + dj);
                        if ii >= 0 && jj >= 0 && (ii as usize) < n && (jj as usize) < n {
                            sum += field[idx(ii as usize, jj as usize)];
                            count += 1.0;
                        }
                    }
                }
                next[idx(i, j)] = sum / count;
            }
        }
        field = next;
    }

    let peak = field.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut scale = if peak > 0.0 { amplitude / peak } else { 0.0 };
    let mut steepest: f64 = 0.0;
    for j in 0..n {
        for i in 0..n {
            if i + 1 < n {
                steepest = steepest.max((field[idx(i + 1, j)] - field[idx(i, j)]).abs());
            }
            if j + 1 < n {
                steepest = steepest.max((field[idx(i, j + 1)] - field[idx(i, j)]).abs());
            }
        }
    }
    if steepest * scale / d > MAX_AXIS_SLOPE {
        scale = MAX_AXIS_SLOPE * d / steepest;
    }

    let mut spline = GroundSpline::new(shape);
    for j in 0..n {
        for i in 0..n {
            spline.set(i as i64 - half, j as i64 - half, field[idx(i, j)] * scale);
        }
    }
    spline
}

/// Planar reference path, parameterized by `tau`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PathShape {
    /// `x = a sin(tau)`, `y = a sin(tau) cos(tau)`.
    FigureEight { a: f64 },
    /// Unit-speed line from `start` along `heading`.
    Line { start: [f64; 2], heading: f64 },
    Circle { center: [f64; 2], radius: f64 },
}

impl PathShape {
    /// Figure-eight whose full loop is `length` meters long.
    pub fn figure_eight_with_length(length: f64) -> Self {
        let unit = PathShape::FigureEight { a: 1.0 }.arc_length(0.0, 2.0 * PI);
        PathShape::FigureEight { a: length / unit }
    }

    pub fn point(&self, tau: f64) -> Vector2<f64> {
        match *self {
            PathShape::FigureEight { a } => Vector2::new(a * tau.sin(), a * tau.sin() * tau.cos()),
            PathShape::Line { start, heading } => {
                Vector2::new(start[0] + tau * heading.cos(), start[1] + tau * heading.sin())
            }
            PathShape::Circle { center, radius } => {
                Vector2::new(center[0] + radius * tau.cos(), center[1] + radius * tau.sin())
            }
        }
    }

    pub fn tangent(&self, tau: f64) -> Vector2<f64> {
        match *self {
            PathShape::FigureEight { a } => Vector2::new(a * tau.cos(), a * (2.0 * tau).cos()),
            PathShape::Line { heading, .. } => Vector2::new(heading.cos(), heading.sin()),
            PathShape::Circle { radius, .. } => Vector2::new(-radius * tau.sin(), radius * tau.cos()),
        }
    }

    pub fn curvature_vector(&self, tau: f64) -> Vector2<f64> {
        match *self {
            PathShape::FigureEight { a } => Vector2::new(-a * tau.sin(), -2.0 * a * (2.0 * tau).sin()),
            PathShape::Line { .. } => Vector2::zeros(),
            PathShape::Circle { radius, .. } => Vector2::new(-radius * tau.cos(), -radius * tau.sin()),
        }
    }

    fn arc_length(&self, t0: f64, t1: f64) -> f64 {
        let n = 20_000;
        let h = (t1 - t0) / n as f64;
        let f = |t: f64| self.tangent(t).norm();
        let mut sum = f(t0) + f(t1);
        for k in 1..n {
            sum += f(t0 + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        sum * h / 3.0
    }
}

/// Stand still, ramp up, then cruise. The ramp
/// `v = cruise (x - sin(2 pi x) / (2 pi))`, `x = t / ramp`, starts and ends
/// with zero acceleration and zero jerk.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedProfile {
    pub rest: f64,
    pub ramp: f64,
    pub cruise: f64,
}

impl SpeedProfile {
    /// Speed and its time derivative.
    pub fn speed(&self, t: f64) -> (f64, f64) {
        let t = t - self.rest;
        if t < 0.0 {
            (0.0, 0.0)
        } else if t < self.ramp {
            let x = t / self.ramp;
            (
                self.cruise * (x - (2.0 * PI * x).sin() / (2.0 * PI)),
                self.cruise / self.ramp * (1.0 - (2.0 * PI * x).cos()),
            )
        } else {
            (self.cruise, 0.0)
        }
    }

    fn ramp_distance(&self, t: f64) -> f64 {
        let x = t / self.ramp;
        self.cruise * self.ramp * (x * x / 2.0 + ((2.0 * PI * x).cos() - 1.0) / (4.0 * PI * PI))
    }

    /// Time at which the travelled distance reaches `length`.
    pub fn time_to_cover(&self, length: f64) -> f64 {
        let ramp_dist = self.cruise * self.ramp / 2.0;
        if length < ramp_dist {
            let (mut lo, mut hi) = (0.0, self.ramp);
            for _ in 0..100 {
                let mid = (lo + hi) / 2.0;
                if self.ramp_distance(mid) < length {
                    lo = mid
                } else {
                    hi = mid
                }
            }
            return self.rest + hi;
        }
        self.rest + self.ramp + (length - ramp_dist) / self.cruise
    }
}

/// Truth for one sample; the side channel the oracle corrector reads.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthSample {
    pub t: f64,
    pub pose: Pose,
    /// IMU-frame velocity.
    pub v: Vector3<f64>,
    pub bias_accel: Vector3<f64>,
    pub bias_gyro: Vector3<f64>,
}

/// Noise-free kinematics for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KinematicSample {
    pub t: f64,
    pub pose: Pose,
    /// Gravity-frame velocity and acceleration of the IMU.
    pub velocity: Vector3<f64>,
    pub accel: Vector3<f64>,
    /// IMU-frame angular rate.
    pub omega: Vector3<f64>,
}

impl KinematicSample {
    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_unchecked(self.pose.yaw, &self.pose.tilt)
    }

    pub fn body_velocity(&self) -> Vector3<f64> {
        self.rotation().transpose() * self.velocity
    }
}

/// Pose on the ground at path parameter `tau`, with yaw near `yaw_hint`.
struct PoseBuilder<'a> {
    spline: &'a GroundSpline,
    path: PathShape,
    lever: Vector3<f64>,
}

impl PoseBuilder<'_> {
    fn pose(&self, tau: f64, yaw_hint: f64) -> Result<(Pose, Vector3<f64>)> {
        let c = self.path.point(tau);
        let surf = self
            .spline
            .eval(c.x, c.y)
            .map_err(|_| Error::PathOutOfExtent { x: c.x, y: c.y })?;
        let normal = Vector3::new(-surf.zx, -surf.zy, 1.0);
        let tan = self.path.tangent(tau);
        let heading = tan.y.atan2(tan.x);
        let mut yaw = yaw_hint + wrap(heading - yaw_hint);
        let mut tilt = tilt_from_normal(&normal, yaw)?;
        for _ in 0..60 {
            let bx = rotation_unchecked(yaw, &tilt).column(0).into_owned();
            let err = wrap(heading - bx.y.atan2(bx.x));
            yaw += err;
            tilt = tilt_from_normal(&normal, yaw)?;
            if err.abs() < 1e-15 {
                break;
            }
        }
        tilt = tilt_from_normal(&normal, yaw)?;
        let contact = Vector3::new(c.x, c.y, surf.z);
        let p = contact - rotation_unchecked(yaw, &tilt) * self.lever;
        Ok((Pose::new(p, yaw, tilt), contact))
    }
}

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) / 2.0
}

/// Samples a vehicle driving `path` with `speed`, starting at `tau = 0`,
/// until it has covered `length` meters. `lever` is the contact point in the
/// IMU frame.
pub fn make_trajectory(
    spline: &GroundSpline,
    path: PathShape,
    speed: SpeedProfile,
    length: f64,
    rate: f64,
    lever: Vector3<f64>,
) -> Result<Vec<KinematicSample>> {
    const SUBSTEPS: usize = 10;
    let builder = PoseBuilder {
        spline,
        path,
        lever,
    };
    let duration = speed.time_to_cover(length);
    let n = (duration * rate).floor() as usize + 1;
    let h = 1.0 / (rate * SUBSTEPS as f64);
    let tau_rate = |t: f64, tau: f64| speed.speed(t).0 / path.tangent(tau).norm();

    let mut out = Vec::with_capacity(n);
    let mut tau = 0.0;
    let mut yaw_hint = {
        let t = path.tangent(0.0);
        t.y.atan2(t.x)
    };
    for k in 0..n {
        let t = k as f64 / rate;
        let (v, vdot) = speed.speed(t);
        let cn = path.tangent(tau).norm();
        let taudot = v / cn;
        let dcn = path.tangent(tau).dot(&path.curvature_vector(tau)) / cn;
        let tauddot = vdot / cn - v * dcn * taudot / (cn * cn);

        let (pose, _) = builder.pose(tau, yaw_hint)?;
        yaw_hint = pose.yaw;
        // Five-point stencils in tau, roughly 2 cm of arc per step.
        let ht = 0.02 / cn;
        let mut ps = [Vector3::zeros(); 5];
        let mut rs = [Matrix3::zeros(); 5];
        for (i, off) in [-2.0, -1.0, 0.0, 1.0, 2.0].iter().enumerate() {
            let (q, _) = builder.pose(tau + off * ht, pose.yaw)?;
            ps[i] = q.p;
            rs[i] = rotation_unchecked(q.yaw, &q.tilt);
        }
        let d1 = (ps[0] - ps[1] * 8.0 + ps[3] * 8.0 - ps[4]) / (12.0 * ht);
        let d2 = (-ps[0] + ps[1] * 16.0 - ps[2] * 30.0 + ps[3] * 16.0 - ps[4]) / (12.0 * ht * ht);
        let r1 = (rs[0] - rs[1] * 8.0 + rs[3] * 8.0 - rs[4]) / (12.0 * ht);
        let r = rotation_unchecked(pose.yaw, &pose.tilt);
        out.push(KinematicSample {
            t,
            pose,
            velocity: d1 * taudot,
            accel: d2 * taudot * taudot + d1 * tauddot,
            omega: vee(&(r.transpose() * r1)) * taudot,
        });

        if k + 1 < n {
            for s in 0..SUBSTEPS {
                let ts = t + s as f64 * h;
                let k1 = tau_rate(ts, tau);
                let k2 = tau_rate(ts + h / 2.0, tau + h / 2.0 * k1);
                let k3 = tau_rate(ts + h / 2.0, tau + h / 2.0 * k2);
                let k4 = tau_rate(ts + h, tau + h * k3);
                tau += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma_accel: f64,
    pub sigma_gyro: f64,
    pub sigma_wheel: f64,
    /// Standard deviation of the initial biases.
    pub bias_accel_init: f64,
    pub bias_gyro_init: f64,
    /// Random-walk intensities, per square-root second.
    pub bias_accel_walk: f64,
    pub bias_gyro_walk: f64,
    /// Forward-speed deficit per rad/s of yaw rate.
    pub slip_gain: f64,
}

impl NoiseModel {
    pub fn zero() -> Self {
        Self {
            sigma_accel: 0.0,
            sigma_gyro: 0.0,
            sigma_wheel: 0.0,
            bias_accel_init: 0.0,
            bias_gyro_init: 0.0,
            bias_accel_walk: 0.0,
            bias_gyro_walk: 0.0,
            slip_gain: 0.0,
        }
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma_accel: 0.05,
            sigma_gyro: 0.002,
            sigma_wheel: 0.02,
            bias_accel_init: 0.05,
            bias_gyro_init: 0.002,
            bias_accel_walk: 1e-4,
            bias_gyro_walk: 1e-5,
            slip_gain: 0.02,
        }
    }
}

struct Gauss {
    rng: ChaCha8Rng,
    unit: Normal<f64>,
}

impl Gauss {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            unit: Normal::new(0.0, 1.0).expect("unit normal"),
        }
    }

    fn scalar(&mut self, sigma: f64) -> f64 {
        self.unit.sample(&mut self.rng) * sigma
    }

    fn vector(&mut self, sigma: f64) -> Vector3<f64> {
        let x = self.scalar(sigma);
        let y = self.scalar(sigma);
        let z = self.scalar(sigma);
        Vector3::new(x, y, z)
    }
}

/// Turns kinematics into a sensor log and its truth side channel. The wheel
/// speeds measure the forward velocity of the contact point at `lever`.
pub fn synthesize_measurements(
    kinematics: &[KinematicSample],
    noise: &NoiseModel,
    wheels: &WheelParams,
    lever: &Vector3<f64>,
    seed: u64,
) -> (Vec<MeasurementSample>, Vec<TruthSample>) {
    let mut g = Gauss::new(seed);
    let mut ba = g.vector(noise.bias_accel_init);
    let mut bg = g.vector(noise.bias_gyro_init);
    let mut log = Vec::with_capacity(kinematics.len());
    let mut truth = Vec::with_capacity(kinematics.len());
    for (k, s) in kinematics.iter().enumerate() {
        if k > 0 {
            let dt = s.t - kinematics[k - 1].t;
            ba += g.vector(noise.bias_accel_walk * dt.sqrt());
            bg += g.vector(noise.bias_gyro_walk * dt.sqrt());
        }
        let r = s.rotation();
        let v_body = r.transpose() * s.velocity;
        let accel = r.transpose() * (s.accel + gravity()) + ba + g.vector(noise.sigma_accel);
        // Gyros report the mean rate over the sample interval.
        let omega_mean = match kinematics.get(k + 1) {
            Some(next) => 0.5 * (s.omega + next.omega),
            None => s.omega,
        };
        let gyro = omega_mean + bg + g.vector(noise.sigma_gyro);
        let contact_v = v_body + s.omega.cross(lever);
        let vx = contact_v.x * (1.0 - noise.slip_gain * s.omega.z.abs());
        let (wl, wr) = wheel_speeds_from_body(vx, s.omega.z, wheels);
        let wheel_left = wl + g.scalar(noise.sigma_wheel);
        let wheel_right = wr + g.scalar(noise.sigma_wheel);
        log.push(MeasurementSample {
            t: s.t,
            accel,
            gyro,
            wheel_left,
            wheel_right,
        });
        truth.push(TruthSample {
            t: s.t,
            pose: s.pose,
            v: v_body,
            bias_accel: ba,
            bias_gyro: bg,
        });
    }
    (log, truth)
}

/// Everything needed to regenerate a synthetic run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub d: f64,
    pub amplitude: f64,
    pub smoothness: u32,
    pub rate: f64,
    pub length: f64,
    pub path: PathShape,
    pub speed: SpeedProfile,
    pub noise: NoiseModel,
    pub wheels: WheelParams,
    pub lever: [f64; 3],
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            seed: 1,
            d: 5.0,
            amplitude: 0.5,
            smoothness: 2,
            rate: 100.0,
            length: 500.0,
            path: PathShape::figure_eight_with_length(500.0),
            speed: SpeedProfile {
                rest: 5.0,
                ramp: 4.0,
                cruise: 5.0,
            },
            noise: NoiseModel::default(),
            wheels: WheelParams::default(),
            lever: [0.0; 3],
        }
    }
}

/// Output of [`simulate`].
#[derive(Clone, Debug)]
pub struct Simulation {
    pub spline: GroundSpline,
    pub kinematics: Vec<KinematicSample>,
    pub log: Vec<MeasurementSample>,
    pub truth: Vec<TruthSample>,
}

impl Scenario {
    pub fn lever(&self) -> Vector3<f64> {
        Vector3::from(self.lever)
    }

    /// Side of a square ground that contains the path with a margin.
    pub fn extent(&self) -> f64 {
        let reach = match self.path {
            PathShape::FigureEight { a } => a,
            PathShape::Line { start, .. } => {
                Vector2::from(start).amax() + self.length
            }
            PathShape::Circle { center, radius } => Vector2::from(center).amax() + radius,
        };
        2.0 * (reach + 4.0 * self.d)
    }
}

pub fn simulate(scenario: &Scenario) -> Result<Simulation> {
    let spline = make_ground(
        scenario.seed,
        scenario.extent(),
        scenario.d,
        scenario.amplitude,
        scenario.smoothness,
    );
    let kinematics = make_trajectory(
        &spline,
        scenario.path,
        scenario.speed,
        scenario.length,
        scenario.rate,
        scenario.lever(),
    )?;
    let (log, truth) = synthesize_measurements(
        &kinematics,
        &scenario.noise,
        &scenario.wheels,
        &scenario.lever(),
        scenario.seed.wrapping_add(0x5eed),
    );
    Ok(Simulation {
        spline,
        kinematics,
        log,
        truth,
    })
}
