//! Sliding-window factor graph for both back-ends.
//!
//! Knots sit on a fixed grid `origin + id * knot_interval`. Each knot is one
//! solver block: 18 entries for CT-IMU (pose, body twist, biases) and 15 for
//! GP-IMU (pose, world velocity, biases). Landmarks are 3-D world points.

mod factor;
mod linear;
mod marginal;
mod solver;
mod window;

use nalgebra::{DMatrix, DVector, Matrix3, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp_preint::{GpError, GpKernelConfig};
use crate::gp_prior::{PriorError, TrajectoryState};
use crate::imu_preint::{ImuBias, ImuError, ImuNoiseConfig, ImuState, Vector15};
use crate::lie::{hat, se3_right_jacobian_inv, Pose3, Twist};
use crate::par::Execution;
use crate::visual::TriangulationConfig;

pub use factor::{whitener, EvalCache, Factor, FactorEnv, Linearized, States, Var};
pub use linear::LinearSystem;
pub use marginal::{marginalize_variables, MarginalPrior, MarginalizationReport};
pub use solver::{build_ct_imu, build_gp_imu, solve, NonlinearProblem, SolveReport, SolveStatus, SolverConfig};
pub use window::{Interval, ProjectionObs, PushReport, SlidingWindow, WindowStats};

pub type KnotId = u64;
pub type LandmarkId = u64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("invalid window configuration: {0}")]
    Config(&'static str),
    #[error("factor couples knots {0} and {1}, which are not adjacent")]
    NonAdjacent(KnotId, KnotId),
    #[error("unknown variable {0:?}")]
    UnknownVariable(Var),
    #[error("problem dimension {actual} differs from the expected {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error("window holds {0} knots; nothing to marginalize")]
    TooShort(usize),
    #[error("{0} back-end requested on a {1} window")]
    BackendMismatch(Backend, Backend),
    #[error("linear system is not positive definite")]
    NotPositiveDefinite,
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Imu(#[from] ImuError),
    #[error(transparent)]
    Gp(#[from] GpError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    CtImu,
    GpImu,
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Backend::CtImu => "ct_imu",
            Backend::GpImu => "gp_imu",
        })
    }
}

impl Backend {
    /// Solver block size of one knot.
    pub fn knot_dim(self) -> usize {
        match self {
            Backend::CtImu => 18,
            Backend::GpImu => 15,
        }
    }
}

/// Standard deviations of the prior that anchors the first knot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    pub position: f64,
    pub rotation: f64,
    pub velocity: f64,
    pub accel_bias: f64,
    pub gyro_bias: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self { position: 1e-6, rotation: 1e-6, velocity: 1e-2, accel_bias: 0.1, gyro_bias: 1e-2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub knot_interval: f64,
    pub min_window_size: usize,
    pub backend: Backend,
    pub solver: SolverConfig,
    /// Isotropic WNOA power spectral density.
    pub qc: f64,
    pub noise: ImuNoiseConfig,
    /// `num_latent` is read as latent states per second of IMU data.
    pub kernel: GpKernelConfig,
    pub pixel_sigma: f64,
    pub huber_delta: f64,
    pub min_track_length: usize,
    pub triangulation: TriangulationConfig,
    pub anchor: AnchorConfig,
    pub execution: Execution,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            knot_interval: 0.05,
            min_window_size: 40,
            backend: Backend::CtImu,
            solver: SolverConfig::default(),
            qc: 0.05,
            noise: ImuNoiseConfig::default(),
            kernel: GpKernelConfig::default(),
            pixel_sigma: 1.0,
            huber_delta: 1.345,
            min_track_length: 4,
            triangulation: TriangulationConfig::default(),
            anchor: AnchorConfig::default(),
            execution: Execution::default(),
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<(), GraphError> {
        if !(self.knot_interval > 0.0 && self.knot_interval.is_finite()) {
            return Err(GraphError::Config("knot_interval must be positive"));
        }
        if self.min_window_size < 2 {
            return Err(GraphError::Config("min_window_size must be at least 2"));
        }
        if !(self.qc > 0.0) {
            return Err(GraphError::Config("qc must be positive"));
        }
        if !(self.pixel_sigma > 0.0 && self.huber_delta > 0.0) {
            return Err(GraphError::Config("pixel_sigma and huber_delta must be positive"));
        }
        if self.min_track_length < 2 {
            return Err(GraphError::Config("min_track_length must be at least 2"));
        }
        let a = &self.anchor;
        if [a.position, a.rotation, a.velocity, a.accel_bias, a.gyro_bias].iter().any(|s| !(*s > 0.0)) {
            return Err(GraphError::Config("anchor sigmas must be positive"));
        }
        self.noise.validate()?;
        self.kernel.validate()?;
        self.solver.validate()
    }

    /// Latent states per knot interval.
    pub fn latent_per_interval(&self) -> usize {
        ((self.kernel.num_latent as f64 * self.knot_interval).round() as usize).max(2)
    }
}

/// State-level variables as they appear in the paper-style state vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarKey {
    /// CT-IMU pose and body twist (12).
    Motion(KnotId),
    /// CT-IMU biases (6).
    Bias(KnotId),
    /// GP-IMU pose, velocity and biases (15).
    Imu(KnotId),
    Landmark(LandmarkId),
}

/// State at one knot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum KnotState {
    Ct { motion: TrajectoryState, bias: ImuBias },
    Gp(ImuState),
}

impl KnotState {
    pub fn stamp(&self) -> f64 {
        match self {
            KnotState::Ct { motion, .. } => motion.stamp,
            KnotState::Gp(s) => s.stamp,
        }
    }

    pub fn pose(&self) -> Pose3 {
        match self {
            KnotState::Ct { motion, .. } => motion.pose,
            KnotState::Gp(s) => s.pose,
        }
    }

    pub fn bias(&self) -> ImuBias {
        match self {
            KnotState::Ct { bias, .. } => *bias,
            KnotState::Gp(s) => s.bias,
        }
    }

    pub fn backend(&self) -> Backend {
        match self {
            KnotState::Ct { .. } => Backend::CtImu,
            KnotState::Gp(_) => Backend::GpImu,
        }
    }

    pub fn dim(&self) -> usize {
        self.backend().knot_dim()
    }

    /// World-frame velocity.
    pub fn world_velocity(&self) -> Vector3<f64> {
        match self {
            KnotState::Ct { motion, .. } => motion.pose.rotation.rotate(&motion.velocity.linear()),
            KnotState::Gp(s) => s.velocity,
        }
    }

    /// IMU-style view (pose, world velocity, biases).
    pub fn imu_state(&self) -> ImuState {
        ImuState::new(self.stamp(), self.pose(), self.world_velocity(), self.bias())
    }

    /// Builds a knot of the given back-end from an IMU-style state and an
    /// angular rate for the body twist.
    pub fn from_imu_state(backend: Backend, s: &ImuState, angular: Vector3<f64>) -> Self {
        match backend {
            Backend::CtImu => KnotState::Ct {
                motion: TrajectoryState::new(
                    s.stamp,
                    s.pose,
                    Twist::new(s.pose.rotation.inverse().rotate(&s.velocity), angular),
                ),
                bias: s.bias,
            },
            Backend::GpImu => KnotState::Gp(*s),
        }
    }

    pub fn with_stamp(mut self, stamp: f64) -> Self {
        match &mut self {
            KnotState::Ct { motion, .. } => motion.stamp = stamp,
            KnotState::Gp(s) => s.stamp = stamp,
        }
        self
    }

    /// `d(IMU tangent) / d(knot tangent)`, 15 x dim.
    pub fn imu_tangent_map(&self) -> DMatrix<f64> {
        match self {
            KnotState::Gp(_) => DMatrix::identity(15, 15),
            KnotState::Ct { motion, .. } => {
                let mut m = DMatrix::zeros(15, 18);
                let r = *motion.pose.rotation.matrix();
                for i in 0..6 {
                    m[(i, i)] = 1.0;
                    m[(9 + i, 12 + i)] = 1.0;
                }
                let dv_dphi: Matrix3<f64> = -r * hat(&motion.velocity.linear());
                m.view_mut((6, 3), (3, 3)).copy_from(&dv_dphi);
                m.view_mut((6, 6), (3, 3)).copy_from(&r);
                m
            }
        }
    }

    pub fn retract(&self, delta: &[f64]) -> Self {
        match self {
            KnotState::Ct { motion, bias } => KnotState::Ct {
                motion: motion.retract(&SVector::<f64, 12>::from_column_slice(&delta[..12])),
                bias: ImuBias::new(
                    bias.accel_bias + Vector3::from_column_slice(&delta[12..15]),
                    bias.gyro_bias + Vector3::from_column_slice(&delta[15..18]),
                ),
            },
            KnotState::Gp(s) => KnotState::Gp(s.retract(&Vector15::from_column_slice(delta))),
        }
    }

    /// Tangent coordinates of `other` relative to `self`.
    pub fn local(&self, other: &KnotState) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        out.rows_mut(0, 6).copy_from(&self.pose().local(&other.pose()));
        let (b0, b1) = (self.bias(), other.bias());
        match (self, other) {
            (KnotState::Ct { motion: m0, .. }, KnotState::Ct { motion: m1, .. }) => {
                out.rows_mut(6, 6).copy_from(&(m1.velocity.0 - m0.velocity.0));
                out.rows_mut(12, 3).copy_from(&(b1.accel_bias - b0.accel_bias));
                out.rows_mut(15, 3).copy_from(&(b1.gyro_bias - b0.gyro_bias));
            }
            _ => {
                out.rows_mut(6, 3).copy_from(&(other.world_velocity() - self.world_velocity()));
                out.rows_mut(9, 3).copy_from(&(b1.accel_bias - b0.accel_bias));
                out.rows_mut(12, 3).copy_from(&(b1.gyro_bias - b0.gyro_bias));
            }
        }
        out
    }

    /// Jacobian of `self.local(other.retract(eps))` at `eps = 0`.
    pub fn local_jacobian(&self, other: &KnotState) -> DMatrix<f64> {
        let n = self.dim();
        let mut j = DMatrix::identity(n, n);
        let xi = self.pose().local(&other.pose());
        j.view_mut((0, 0), (6, 6)).copy_from(&se3_right_jacobian_inv(&xi));
        j
    }
}
