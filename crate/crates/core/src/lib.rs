//! Continuous-time visual-inertial estimation with two Gaussian-process
//! back-ends.
//!
//! * **CT-IMU**: a white-noise-on-acceleration (WNOA) GP motion prior over
//!   SE(3) knots, classical on-manifold IMU preintegration between knots, and
//!   projection factors evaluated on the interpolated trajectory.
//! * **GP-IMU**: no motion prior; IMU data are regressed onto latent
//!   rotation-rate and acceleration states, and the pose at any measurement
//!   time is inferred from the previous IMU state through closed-form
//!   integrals of the GP posterior mean.
//!
//! Both are solved as sliding-window factor graphs with Schur-complement
//! marginalization of the oldest knots. A built-in simulator produces the
//! asynchronous feature tracks and IMU streams consumed by the estimators.

pub mod config;
pub mod error;
pub mod gp_preint;
pub mod gp_prior;
pub mod graph;
pub mod imu_preint;
pub mod io;
pub mod lie;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod sim;
pub mod visual;

pub use error::{Error, Result};
pub use lie::{Pose3, Rot3, Twist};
pub use par::Execution;
