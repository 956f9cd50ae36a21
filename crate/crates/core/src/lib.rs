//! Radar-to-camera extrinsic calibration from radar ego-velocity and camera
//! pose measurements.
//!
//! The platform trajectory is a continuous-time cumulative B-spline on ℝ³ ×
//! SO(3). Radar ego-velocities (estimated per scan with MLESAC) and camera
//! poses are fused in one batch nonlinear least-squares problem that solves
//! for the trajectory and the fixed radar-to-camera transform.

pub mod calibration;
pub mod geometry;
pub mod io;
pub mod observability;
pub mod optimizer;
pub mod radar;
pub mod simulator;
