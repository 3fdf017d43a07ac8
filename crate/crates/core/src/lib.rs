//! Ground-effect edge detection for small quadrotors.
//!
//! The pipeline turns IMU and motor telemetry into a three-channel spectral
//! feature series, estimates the external disturbance force from Newton's
//! second law, and classifies the surface under the drone with a small
//! convolutional network whose training loss and output are both gated by an
//! adaptive-threshold detector on that force.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod compress;
pub mod config;
pub mod error;
pub mod eval;
pub mod nn;
pub mod params;
pub mod physics;
pub mod pipeline;
pub mod simulator;
pub mod spectral;
pub mod telemetry;

pub use error::{Error, Result};
pub use params::DroneParams;
