//! Measurement correctors: bias estimates, corrected IMU-frame velocity and
//! their covariances, plus the likelihood losses and coverage diagnostic used
//! to judge them.
//!
//! A corrector returns log-standard-deviations (`zeta`); covariances are
//! always `exp(2 zeta)`, which keeps them positive. The corrected velocity is
//! composed by the library as `R_BI v_wheel + delta_v` so correctors only
//! supply the additive term.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attitude::quat_log_error;
use crate::error::{Error, Result};
use crate::models::{gravity, wheel_body_velocity, MeasurementSample, WheelParams};
use crate::synth::TruthSample;

/// `zeta` is clamped to this magnitude so `exp(2 zeta)` stays a normal,
/// strictly positive float.
pub const ZETA_LIMIT: f64 = 300.0;

pub fn variance_from_zeta(zeta: &Vector3<f64>) -> Vector3<f64> {
    zeta.map(|z| (2.0 * z.clamp(-ZETA_LIMIT, ZETA_LIMIT)).exp())
}

pub fn zeta_from_variance(var: &Vector3<f64>) -> Vector3<f64> {
    var.map(|v| 0.5 * v.ln())
}

/// Consecutive samples handed to a corrector.
#[derive(Clone, Debug)]
pub struct SampleWindow<'a> {
    samples: &'a [MeasurementSample],
    dt: f64,
}

impl<'a> SampleWindow<'a> {
    pub fn new(samples: &'a [MeasurementSample], expected_len: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyWindow);
        }
        if samples.len() != expected_len {
            return Err(Error::MalformedWindow(format!(
                "expected {expected_len} samples, got {}",
                samples.len()
            )));
        }
        let dt = if samples.len() > 1 {
            (samples[samples.len() - 1].t - samples[0].t) / (samples.len() - 1) as f64
        } else {
            0.0
        };
        for w in samples.windows(2) {
            let step = w[1].t - w[0].t;
            if step <= 0.0 || (step - dt).abs() > 1e-6 {
                return Err(Error::MalformedWindow(format!(
                    "non-uniform timestamps at t = {}",
                    w[1].t
                )));
            }
        }
        Ok(Self { samples, dt })
    }

    pub fn samples(&self) -> &'a [MeasurementSample] {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn last(&self) -> &'a MeasurementSample {
        &self.samples[self.samples.len() - 1]
    }
}

/// What a corrector produces for one window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawCorrection {
    pub bias_accel: Vector3<f64>,
    pub bias_gyro: Vector3<f64>,
    pub zeta_v_inc: Vector3<f64>,
    pub zeta_q_inc: Vector3<f64>,
    /// Additive IMU-frame velocity correction.
    pub delta_v: Vector3<f64>,
    pub zeta_v: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrectorOutput {
    pub t: f64,
    pub bias_accel: Vector3<f64>,
    pub bias_gyro: Vector3<f64>,
    /// Window velocity-increment variance per axis.
    pub var_v_inc: Vector3<f64>,
    /// Window rotation-increment variance per axis.
    pub var_q_inc: Vector3<f64>,
    /// Corrected IMU-frame velocity.
    pub velocity: Vector3<f64>,
    pub var_velocity: Vector3<f64>,
}

impl CorrectorOutput {
    /// Adds the wheel-frame velocity of the window's last sample, rotated by
    /// `wheel_to_imu`, to the corrector's additive term.
    pub fn compose(
        raw: &RawCorrection,
        window: &SampleWindow<'_>,
        wheels: &WheelParams,
        wheel_to_imu: &Matrix3<f64>,
    ) -> Self {
        let last = window.last();
        let (vx, _) = wheel_body_velocity(last.wheel_left, last.wheel_right, wheels);
        Self {
            t: last.t,
            bias_accel: raw.bias_accel,
            bias_gyro: raw.bias_gyro,
            var_v_inc: variance_from_zeta(&raw.zeta_v_inc),
            var_q_inc: variance_from_zeta(&raw.zeta_q_inc),
            velocity: wheel_to_imu * Vector3::new(vx, 0.0, 0.0) + raw.delta_v,
            var_velocity: variance_from_zeta(&raw.zeta_v),
        }
    }
}

pub trait Corrector {
    fn correct(&mut self, window: &SampleWindow<'_>) -> Result<RawCorrection>;
}

/// Variances a corrector reports when it has nothing better.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NominalVariances {
    pub v_inc: f64,
    pub q_inc: f64,
    pub velocity: f64,
}

/// Zero biases and the rigid-body lever-arm transfer of the wheel speed.
#[derive(Clone, Debug)]
pub struct Passthrough {
    pub lever: Vector3<f64>,
    pub variances: NominalVariances,
}

impl Corrector for Passthrough {
    fn correct(&mut self, window: &SampleWindow<'_>) -> Result<RawCorrection> {
        let w = window.last().gyro;
        Ok(RawCorrection {
            bias_accel: Vector3::zeros(),
            bias_gyro: Vector3::zeros(),
            zeta_v_inc: zeta_from_variance(&Vector3::repeat(self.variances.v_inc)),
            zeta_q_inc: zeta_from_variance(&Vector3::repeat(self.variances.q_inc)),
            delta_v: -w.cross(&self.lever),
            zeta_v: zeta_from_variance(&Vector3::repeat(self.variances.velocity)),
        })
    }
}

/// Perturbation sizes and noise levels the oracle reports against.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleParams {
    pub sigma_bias_accel: f64,
    pub sigma_bias_gyro: f64,
    pub sigma_velocity: f64,
    pub sigma_accel_noise: f64,
    pub sigma_gyro_noise: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            sigma_bias_accel: 1e-3,
            sigma_bias_gyro: 1e-4,
            sigma_velocity: 0.02,
            sigma_accel_noise: 0.05,
            sigma_gyro_noise: 0.002,
        }
    }
}

/// Reads the simulator's truth and reports it with a seeded perturbation.
pub struct Oracle {
    truth: Vec<TruthSample>,
    params: OracleParams,
    wheels: WheelParams,
    wheel_to_imu: Matrix3<f64>,
    rng: ChaCha8Rng,
}

impl Oracle {
    pub fn new(
        truth: Vec<TruthSample>,
        params: OracleParams,
        wheels: WheelParams,
        wheel_to_imu: Matrix3<f64>,
        seed: u64,
    ) -> Self {
        Self {
            truth,
            params,
            wheels,
            wheel_to_imu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn truth_at(&self, t: f64) -> Result<&TruthSample> {
        let i = self.truth.partition_point(|s| s.t < t - 1e-6);
        match self.truth.get(i) {
            Some(s) if (s.t - t).abs() <= 1e-6 => Ok(s),
            _ => Err(Error::MalformedWindow(format!("no truth sample at t = {t}"))),
        }
    }

    fn noise(&mut self, sigma: f64) -> Vector3<f64> {
        if sigma == 0.0 {
            return Vector3::zeros();
        }
        let n = Normal::new(0.0, sigma).expect("finite sigma");
        Vector3::new(
            n.sample(&mut self.rng),
            n.sample(&mut self.rng),
            n.sample(&mut self.rng),
        )
    }
}

impl Corrector for Oracle {
    fn correct(&mut self, window: &SampleWindow<'_>) -> Result<RawCorrection> {
        let last = window.last();
        let truth = *self.truth_at(last.t)?;
        let p = self.params;
        let span = window.len() as f64 * window.dt();
        let n_dt2 = window.len() as f64 * window.dt() * window.dt();
        let var_v_inc = n_dt2 * p.sigma_accel_noise.powi(2) + (span * p.sigma_bias_accel).powi(2);
        let var_q_inc = n_dt2 * p.sigma_gyro_noise.powi(2) + (span * p.sigma_bias_gyro).powi(2);
        let floor = |s: f64| s.max(1e-6).powi(2);

        let bias_accel = truth.bias_accel + self.noise(p.sigma_bias_accel);
        let bias_gyro = truth.bias_gyro + self.noise(p.sigma_bias_gyro);
        let (vx, _) = wheel_body_velocity(last.wheel_left, last.wheel_right, &self.wheels);
        let delta_v = truth.v - self.wheel_to_imu * Vector3::new(vx, 0.0, 0.0)
            + self.noise(p.sigma_velocity);
        Ok(RawCorrection {
            bias_accel,
            bias_gyro,
            zeta_v_inc: zeta_from_variance(&Vector3::repeat(var_v_inc.max(floor(0.0)))),
            zeta_q_inc: zeta_from_variance(&Vector3::repeat(var_q_inc.max(floor(0.0)))),
            delta_v,
            zeta_v: zeta_from_variance(&Vector3::repeat(floor(p.sigma_velocity))),
        })
    }
}

/// Constant biases estimated from a stationary calibration segment.
#[derive(Clone, Debug)]
pub struct ConstantFit {
    pub lever: Vector3<f64>,
    pub window_len: usize,
    pub dt: f64,
    pub velocity_variance: f64,
    calibration: Option<Calibration>,
}

#[derive(Clone, Copy, Debug)]
struct Calibration {
    bias_accel: Vector3<f64>,
    bias_gyro: Vector3<f64>,
    var_accel: Vector3<f64>,
    var_gyro: Vector3<f64>,
}

impl ConstantFit {
    pub fn new(lever: Vector3<f64>, window_len: usize, dt: f64, velocity_variance: f64) -> Self {
        Self {
            lever,
            window_len,
            dt,
            velocity_variance,
            calibration: None,
        }
    }

    /// Fits biases from samples taken at rest with IMU-to-gravity rotation
    /// `rotation`.
    pub fn calibrate(&mut self, segment: &[MeasurementSample], rotation: &Matrix3<f64>) -> Result<()> {
        if segment.len() < 2 {
            return Err(Error::EmptyWindow);
        }
        let n = segment.len() as f64;
        let rest = rotation.transpose() * gravity();
        let mean_a = segment.iter().map(|s| s.accel).sum::<Vector3<f64>>() / n;
        let mean_g = segment.iter().map(|s| s.gyro).sum::<Vector3<f64>>() / n;
        let var = |f: &dyn Fn(&MeasurementSample) -> Vector3<f64>, m: Vector3<f64>| {
            segment
                .iter()
                .map(|s| (f(s) - m).component_mul(&(f(s) - m)))
                .sum::<Vector3<f64>>()
                / (n - 1.0)
        };
        self.calibration = Some(Calibration {
            bias_accel: mean_a - rest,
            bias_gyro: mean_g,
            var_accel: var(&|s| s.accel, mean_a),
            var_gyro: var(&|s| s.gyro, mean_g),
        });
        Ok(())
    }

    pub fn is_calibrated(&self) -> bool {
        self.calibration.is_some()
    }
}

impl Corrector for ConstantFit {
    fn correct(&mut self, window: &SampleWindow<'_>) -> Result<RawCorrection> {
        let cal = self.calibration.ok_or(Error::Uncalibrated)?;
        let n_dt2 = self.window_len as f64 * self.dt * self.dt;
        let w = window.last().gyro - cal.bias_gyro;
        let tiny = Vector3::repeat(1e-12);
        Ok(RawCorrection {
            bias_accel: cal.bias_accel,
            bias_gyro: cal.bias_gyro,
            zeta_v_inc: zeta_from_variance(&(cal.var_accel * n_dt2).sup(&tiny)),
            zeta_q_inc: zeta_from_variance(&(cal.var_gyro * n_dt2).sup(&tiny)),
            delta_v: -w.cross(&self.lever),
            zeta_v: zeta_from_variance(&Vector3::repeat(self.velocity_variance)),
        })
    }
}

/// `1/(2N) sum (log det Sigma_i + e_i^T Sigma_i^-1 e_i)` for diagonal
/// covariances.
pub fn gaussian_nll(errors: &[Vector3<f64>], variances: &[Vector3<f64>]) -> Result<f64> {
    if errors.len() != variances.len() {
        return Err(Error::LengthMismatch {
            left: errors.len(),
            right: variances.len(),
        });
    }
    if errors.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let mut total = 0.0;
    for (e, var) in errors.iter().zip(variances) {
        for i in 0..3 {
            if !(var[i] > 0.0) {
                return Err(Error::NonPositiveCovariance { value: var[i] });
            }
            total += var[i].ln() + e[i] * e[i] / var[i];
        }
    }
    Ok(total / (2.0 * errors.len() as f64))
}

/// One window's predicted and true increments.
#[derive(Clone, Copy, Debug)]
pub struct IncrementCase {
    pub dv_est: Vector3<f64>,
    pub dv_true: Vector3<f64>,
    pub var_v: Vector3<f64>,
    pub q_est: UnitQuaternion<f64>,
    pub q_true: UnitQuaternion<f64>,
    pub var_q: Vector3<f64>,
}

/// Velocity-increment and rotation-increment likelihood losses over a batch.
pub fn nll_debias_loss(batch: &[IncrementCase]) -> Result<(f64, f64)> {
    let ev: Vec<_> = batch.iter().map(|c| c.dv_true - c.dv_est).collect();
    let vv: Vec<_> = batch.iter().map(|c| c.var_v).collect();
    let eq: Vec<_> = batch.iter().map(|c| quat_log_error(&c.q_est, &c.q_true)).collect();
    let vq: Vec<_> = batch.iter().map(|c| c.var_q).collect();
    Ok((gaussian_nll(&ev, &vv)?, gaussian_nll(&eq, &vq)?))
}

/// Likelihood loss of corrected IMU-frame velocities.
pub fn nll_velocity_loss(
    estimates: &[Vector3<f64>],
    variances: &[Vector3<f64>],
    truth: &[Vector3<f64>],
) -> Result<f64> {
    if estimates.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: estimates.len(),
            right: truth.len(),
        });
    }
    let errors: Vec<_> = truth.iter().zip(estimates).map(|(t, e)| t - e).collect();
    gaussian_nll(&errors, variances)
}

/// Fraction of samples per axis with `|e| <= k sigma`.
pub fn sigma_coverage(errors: &[Vector3<f64>], sigmas: &[Vector3<f64>], k: f64) -> Result<Vector3<f64>> {
    if errors.len() != sigmas.len() {
        return Err(Error::LengthMismatch {
            left: errors.len(),
            right: sigmas.len(),
        });
    }
    if errors.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let mut hits = Vector3::<f64>::zeros();
    for (e, s) in errors.iter().zip(sigmas) {
        for i in 0..3 {
            if e[i].abs() <= k * s[i] {
                hits[i] += 1.0;
            }
        }
    }
    Ok(hits / errors.len() as f64)
}
