//! Wheel-inertial odometry with a B-spline ground-surface constraint.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attitude;
pub mod config;
pub mod corrector;
pub mod error;
pub mod eval;
pub mod filter;
pub mod models;
pub mod pipeline;
pub mod spline;
pub mod synth;
pub mod verify;

pub use error::{Error, Result};
