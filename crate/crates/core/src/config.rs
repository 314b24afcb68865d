//! Flat `key = value` run configuration shared by simulation and estimation.
//!
//! ```text
//! # comments start with '#'
//! seed = 7
//! d_m = 5.0
//! sigma2_M = 10, 10, 10
//! corrector = oracle
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corrector::OracleParams;
use crate::filter::FilterConfig;
use crate::spline::SplineDegree;
use crate::synth::{PathShape, Scenario};
use crate::{Error, Result};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "WING_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectorKind {
    Passthrough,
    Oracle,
    ConstantFit,
}

impl CorrectorKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "passthrough" => Some(Self::Passthrough),
            "oracle" => Some(Self::Oracle),
            "constant_fit" => Some(Self::ConstantFit),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Passthrough => "passthrough",
            Self::Oracle => "oracle",
            Self::ConstantFit => "constant_fit",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub seed: u64,
    pub corrector: CorrectorKind,
    pub filter: FilterConfig,
    /// Ground truth generator. Its seed, wheels and lever arm follow the
    /// top-level values.
    pub scenario: Scenario,
    pub oracle: OracleParams,
    /// Wheel velocity variance reported by the passthrough and constant-fit
    /// correctors.
    pub velocity_variance: f64,
    /// Length of the stationary segment the constant-fit corrector
    /// calibrates on.
    pub calibration_seconds: f64,
}

impl Default for Config {
    fn default() -> Self {
        let scenario = Scenario::default();
        let filter = FilterConfig::default();
        Self {
            seed: scenario.seed,
            corrector: CorrectorKind::Oracle,
            filter,
            scenario,
            oracle: OracleParams::default(),
            velocity_variance: 4e-4,
            calibration_seconds: scenario.speed.rest,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "corrector",
    "d_m",
    "d_s",
    "sigma2_M",
    "window",
    "cadence",
    "lever",
    "spline_degree",
    "manifold",
    "velocity_updates",
    "gate",
    "init_var_imu",
    "init_var_control",
    "min_init_poses",
    "filter_sigma_accel",
    "filter_sigma_gyro",
    "wheel_radius_left",
    "wheel_radius_right",
    "wheelbase",
    "velocity_variance",
    "calibration_seconds",
    "oracle_sigma_bias_accel",
    "oracle_sigma_bias_gyro",
    "oracle_sigma_velocity",
    "ground_d",
    "ground_amplitude",
    "ground_smoothness",
    "rate",
    "length",
    "path",
    "path_radius",
    "path_heading",
    "speed_rest",
    "speed_ramp",
    "speed_cruise",
    "noise_accel",
    "noise_gyro",
    "noise_wheel",
    "bias_accel_init",
    "bias_gyro_init",
    "bias_accel_walk",
    "bias_gyro_walk",
    "slip_gain",
];

struct Value<'a> {
    text: &'a str,
    line: usize,
    column: usize,
    origin: &'a str,
}

impl Value<'_> {
    fn err(&self, message: String) -> Error {
        Error::Parse {
            path: self.origin.to_string(),
            line: self.line,
            column: self.column,
            message,
        }
    }

    fn f64(&self) -> Result<f64> {
        match self.text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(self.err(format!("expected a number, found `{}`", self.text))),
        }
    }

    fn usize(&self) -> Result<usize> {
        self.text
            .parse()
            .map_err(|_| self.err(format!("expected a non-negative integer, found `{}`", self.text)))
    }

    fn u64(&self) -> Result<u64> {
        self.text
            .parse()
            .map_err(|_| self.err(format!("expected a non-negative integer, found `{}`", self.text)))
    }

    fn bool(&self) -> Result<bool> {
        match self.text {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(self.err(format!("expected true or false, found `{}`", self.text))),
        }
    }

    fn list(&self) -> Result<Vec<f64>> {
        self.text
            .split(',')
            .map(|p| {
                let p = p.trim();
                p.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| self.err(format!("expected a number, found `{p}`")))
            })
            .collect()
    }

    fn triple(&self) -> Result<[f64; 3]> {
        let v = self.list()?;
        match v.len() {
            3 => Ok([v[0], v[1], v[2]]),
            n => Err(self.err(format!("expected three comma-separated numbers, found {n}"))),
        }
    }
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses and validates. `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut path_kind = "figure_eight".to_string();
        let mut path_radius = 40.0;
        let mut path_heading = 0.0;
        let mut calibration_set = false;
        let mut seen: Vec<&str> = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("");
            if content.trim().is_empty() {
                continue;
            }
            let key_col = content.len() - content.trim_start().len() + 1;
            let Some(eq) = content.find('=') else {
                return Err(Error::Parse {
                    path: origin.into(),
                    line,
                    column: key_col,
                    message: "expected `key = value`".into(),
                });
            };
            let key = content[..eq].trim();
            let rest = &content[eq + 1..];
            let value = Value {
                text: rest.trim(),
                line,
                column: eq + 2 + (rest.len() - rest.trim_start().len()),
                origin,
            };
            let key_err = |message: String| Error::Parse {
                path: origin.into(),
                line,
                column: key_col,
                message,
            };
            let Some(&known) = KEYS.iter().find(|k| **k == key) else {
                return Err(key_err(format!("unknown key `{key}`")));
            };
            if seen.contains(&known) {
                return Err(key_err(format!("duplicate key `{key}`")));
            }
            seen.push(known);
            if value.text.is_empty() {
                return Err(value.err(format!("missing value for `{key}`")));
            }

            let f = &mut cfg.filter;
            let sc = &mut cfg.scenario;
            match known {
                "seed" => cfg.seed = value.u64()?,
                "corrector" => {
                    cfg.corrector = CorrectorKind::parse(value.text).ok_or_else(|| {
                        value.err(format!(
                            "unknown corrector `{}` (expected passthrough, oracle or constant_fit)",
                            value.text
                        ))
                    })?
                }
                "d_m" => f.d_m = value.f64()?,
                "d_s" => f.d_s = value.f64()?,
                "sigma2_M" => {
                    let v = value.list()?;
                    f.sigma2_m = match v.len() {
                        1 => [v[0]; 3],
                        3 => [v[0], v[1], v[2]],
                        n => return Err(value.err(format!("expected one or three numbers, found {n}"))),
                    }
                }
                "window" => f.window = value.usize()?,
                "cadence" => f.cadence = value.usize()?,
                "lever" => f.lever = value.triple()?,
                "spline_degree" => {
                    let d = value.text.parse::<u32>().map_err(|_| value.err("expected 1, 2 or 3".into()))?;
                    f.degree = SplineDegree::from_degree(d).map_err(|_| value.err("expected 1, 2 or 3".into()))?;
                }
                "manifold" => f.manifold = value.bool()?,
                "velocity_updates" => f.velocity_updates = value.bool()?,
                "gate" => f.gate = value.bool()?,
                "init_var_imu" => f.init_var_imu = value.f64()?,
                "init_var_control" => f.init_var_control = value.f64()?,
                "min_init_poses" => f.min_init_poses = value.usize()?,
                "filter_sigma_accel" => f.sigma_accel = value.f64()?,
                "filter_sigma_gyro" => f.sigma_gyro = value.f64()?,
                "wheel_radius_left" => f.wheels.r_left = value.f64()?,
                "wheel_radius_right" => f.wheels.r_right = value.f64()?,
                "wheelbase" => f.wheels.wheelbase = value.f64()?,
                "velocity_variance" => cfg.velocity_variance = value.f64()?,
                "calibration_seconds" => {
                    cfg.calibration_seconds = value.f64()?;
                    calibration_set = true;
                }
                "oracle_sigma_bias_accel" => cfg.oracle.sigma_bias_accel = value.f64()?,
                "oracle_sigma_bias_gyro" => cfg.oracle.sigma_bias_gyro = value.f64()?,
                "oracle_sigma_velocity" => cfg.oracle.sigma_velocity = value.f64()?,
                "ground_d" => sc.d = value.f64()?,
                "ground_amplitude" => sc.amplitude = value.f64()?,
                "ground_smoothness" => sc.smoothness = value.usize()? as u32,
                "rate" => sc.rate = value.f64()?,
                "length" => sc.length = value.f64()?,
                "path" => {
                    if !matches!(value.text, "figure_eight" | "circle" | "line") {
                        return Err(value.err(format!(
                            "unknown path `{}` (expected figure_eight, circle or line)",
                            value.text
                        )));
                    }
                    path_kind = value.text.to_string();
                }
                "path_radius" => path_radius = value.f64()?,
                "path_heading" => path_heading = value.f64()?,
                "speed_rest" => sc.speed.rest = value.f64()?,
                "speed_ramp" => sc.speed.ramp = value.f64()?,
                "speed_cruise" => sc.speed.cruise = value.f64()?,
                "noise_accel" => sc.noise.sigma_accel = value.f64()?,
                "noise_gyro" => sc.noise.sigma_gyro = value.f64()?,
                "noise_wheel" => sc.noise.sigma_wheel = value.f64()?,
                "bias_accel_init" => sc.noise.bias_accel_init = value.f64()?,
                "bias_gyro_init" => sc.noise.bias_gyro_init = value.f64()?,
                "bias_accel_walk" => sc.noise.bias_accel_walk = value.f64()?,
                "bias_gyro_walk" => sc.noise.bias_gyro_walk = value.f64()?,
                "slip_gain" => sc.noise.slip_gain = value.f64()?,
                _ => unreachable!("key list and match arms disagree on `{known}`"),
            }
        }

        cfg.scenario.path = match path_kind.as_str() {
            "circle" => PathShape::Circle {
                center: [0.0, 0.0],
                radius: path_radius,
            },
            "line" => PathShape::Line {
                start: [0.0, 0.0],
                heading: path_heading,
            },
            _ => PathShape::figure_eight_with_length(cfg.scenario.length),
        };
        if !calibration_set {
            cfg.calibration_seconds = cfg.scenario.speed.rest;
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces the seed with `value` when given, as read from
    /// [`SEED_ENV`].
    pub fn with_seed_override(mut self, value: Option<&str>) -> Result<Self> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be a non-negative integer, found `{v}`")))?;
            self.sync();
        }
        Ok(self)
    }

    /// Copies the shared values into the scenario.
    pub fn sync(&mut self) {
        self.scenario.seed = self.seed;
        self.scenario.wheels = self.filter.wheels;
        self.scenario.lever = self.filter.lever;
        self.oracle.sigma_accel_noise = self.scenario.noise.sigma_accel;
        self.oracle.sigma_gyro_noise = self.scenario.noise.sigma_gyro;
    }

    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        let positive = [
            ("ground_d", self.scenario.d),
            ("rate", self.scenario.rate),
            ("length", self.scenario.length),
            ("speed_cruise", self.scenario.speed.cruise),
            ("wheel_radius_left", self.filter.wheels.r_left),
            ("wheel_radius_right", self.filter.wheels.r_right),
            ("wheelbase", self.filter.wheels.wheelbase),
            ("velocity_variance", self.velocity_variance),
        ];
        for (key, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{key} must be positive, found {v}")));
            }
        }
        let non_negative = [
            ("speed_rest", self.scenario.speed.rest),
            ("speed_ramp", self.scenario.speed.ramp),
            ("calibration_seconds", self.calibration_seconds),
            ("noise_accel", self.scenario.noise.sigma_accel),
            ("noise_gyro", self.scenario.noise.sigma_gyro),
            ("noise_wheel", self.scenario.noise.sigma_wheel),
            ("oracle_sigma_bias_accel", self.oracle.sigma_bias_accel),
            ("oracle_sigma_bias_gyro", self.oracle.sigma_bias_gyro),
            ("oracle_sigma_velocity", self.oracle.sigma_velocity),
        ];
        for (key, v) in non_negative {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{key} must be non-negative, found {v}")));
            }
        }
        if self.scenario.rate * crate::models::MAX_DT < 1.0 {
            return Err(Error::Config(format!(
                "rate must be at least {} Hz",
                1.0 / crate::models::MAX_DT
            )));
        }
        Ok(())
    }
}
