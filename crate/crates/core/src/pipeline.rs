//! Wiring from a [`Config`] to a corrector, an initial state and a filter run.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::config::{Config, CorrectorKind};
use crate::corrector::{ConstantFit, Corrector, NominalVariances, Oracle, Passthrough};
use crate::filter::{run, RunOutput};
use crate::models::{ImuState, MeasurementSample};
use crate::synth::{simulate, Simulation, TruthSample};
use crate::{Error, Result};

/// Samples averaged to level the initial attitude when no truth is given.
const LEVELING_SAMPLES: usize = 100;

pub fn simulate_config(config: &Config) -> Result<Simulation> {
    let mut scenario = config.scenario;
    scenario.seed = config.seed;
    simulate(&scenario)
}

/// First truth sample when available. Otherwise the vehicle is assumed at
/// rest at the origin with zero yaw, and the tilt is levelled from the mean
/// specific force of the first samples.
pub fn initial_state(log: &[MeasurementSample], truth: Option<&[TruthSample]>) -> Result<ImuState> {
    if let Some(g) = truth.and_then(|t| t.first()) {
        return Ok(ImuState {
            p: g.pose.p,
            v: g.v,
            yaw: g.pose.yaw,
            tilt: g.pose.tilt,
        });
    }
    let head = &log[..log.len().min(LEVELING_SAMPLES)];
    if head.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let mean = head.iter().map(|s| s.accel).sum::<Vector3<f64>>() / head.len() as f64;
    Ok(ImuState {
        p: Vector3::zeros(),
        v: Vector3::zeros(),
        yaw: 0.0,
        tilt: level_tilt(&mean)?,
    })
}

/// Zero-yaw tilt for a specific force measured at rest (`R^T g`).
pub fn level_tilt(accel: &Vector3<f64>) -> Result<Vector2<f64>> {
    let n = accel.norm();
    // World up expressed in the body frame.
    let up = -accel / n;
    if !(n > 0.0) || up.z <= 1e-9 {
        return Err(Error::DegenerateNormal {
            x: up.x,
            y: up.y,
            z: up.z,
        });
    }
    Ok(-Vector2::new(up.x, up.y) / (1.0 + up.z))
}

pub fn make_corrector(
    config: &Config,
    log: &[MeasurementSample],
    truth: Option<&[TruthSample]>,
    initial: &ImuState,
) -> Result<Box<dyn Corrector>> {
    let f = &config.filter;
    let lever = f.lever();
    let dt = match log {
        [a, b, ..] => b.t - a.t,
        _ => return Err(Error::EmptyWindow),
    };
    Ok(match config.corrector {
        CorrectorKind::Passthrough => {
            let n_dt2 = f.window as f64 * dt * dt;
            Box::new(Passthrough {
                lever,
                variances: NominalVariances {
                    v_inc: n_dt2 * f.sigma_accel.powi(2),
                    q_inc: n_dt2 * f.sigma_gyro.powi(2),
                    velocity: config.velocity_variance,
                },
            })
        }
        CorrectorKind::Oracle => {
            let truth = truth.ok_or_else(|| Error::Config("the oracle corrector needs the truth file".into()))?;
            Box::new(Oracle::new(
                truth.to_vec(),
                config.oracle,
                f.wheels,
                Matrix3::identity(),
                config.seed,
            ))
        }
        CorrectorKind::ConstantFit => {
            let t0 = log[0].t;
            let end = log.partition_point(|s| s.t < t0 + config.calibration_seconds);
            let mut c = ConstantFit::new(lever, f.window, dt, config.velocity_variance);
            c.calibrate(&log[..end], &initial.rotation())?;
            Box::new(c)
        }
    })
}

/// Runs the configured corrector and filter over a log.
pub fn estimate(config: &Config, log: &[MeasurementSample], truth: Option<&[TruthSample]>) -> Result<RunOutput> {
    let initial = initial_state(log, truth)?;
    let mut corrector = make_corrector(config, log, truth, &initial)?;
    run(log, corrector.as_mut(), &config.filter, initial)
}
