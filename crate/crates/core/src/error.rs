use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tilt ({s1}, {s2}) is at or beyond the singular band (|s|^2 = {norm_sq})")]
    TiltSingularity { s1: f64, s2: f64, norm_sq: f64 },

    #[error("normal ({x}, {y}, {z}) has no upward component")]
    DegenerateNormal { x: f64, y: f64, z: f64 },

    #[error("control point ({i}, {j}) is not available")]
    MissingControlPoint { i: i64, j: i64 },

    #[error("least-squares control fit needs at least {required} poses, got {got}")]
    InsufficientPoses { required: usize, got: usize },

    #[error("invalid time step {dt} s (expected 0 <= dt <= {max})")]
    InvalidTimeStep { dt: f64, max: f64 },

    #[error("empty sample window")]
    EmptyWindow,

    #[error("malformed sample window: {0}")]
    MalformedWindow(String),

    #[error("constant-fit corrector used before a calibration segment was supplied")]
    Uncalibrated,

    #[error("covariance entry {value} is not strictly positive")]
    NonPositiveCovariance { value: f64 },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("no timestamps could be associated between the trajectories")]
    EmptyAssociation,

    #[error("non-finite value in filter state")]
    NonFiniteState,

    #[error("innovation rejected by chi-square gate (d^2 = {mahalanobis_sq:.3} > {threshold:.3})")]
    InnovationGated { mahalanobis_sq: f64, threshold: f64 },

    #[error("path leaves the ground extent at ({x:.3}, {y:.3})")]
    PathOutOfExtent { x: f64, y: f64 },

    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("sample {index}: {source}")]
    AtSample {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_sample(self, index: usize) -> Self {
        match self {
            e @ Error::AtSample { .. } => e,
            e => Error::AtSample {
                index,
                source: Box::new(e),
            },
        }
    }

    /// Innermost error, looking through sample-index context.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtSample { source, .. } => source.root(),
            e => e,
        }
    }
}
