//! Scenario configuration, read from TOML.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::WindowConfig;
use crate::imu_preint::ImuBias;
use crate::lie::{Pose3, Rot3};
use crate::metrics::DEFAULT_DELTAS;
use crate::sim::{default_camera, LandmarkField, SensorRig, SimNoise, TrajectorySpec};
use crate::visual::CameraModel;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// First knot seeded with the true pose, velocity and bias.
    #[default]
    GroundTruth,
    /// True first pose, zero velocity and zero biases.
    Rest,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraConfig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    /// Row-major camera-to-body rotation.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Default for CameraConfig {
    fn default() -> Self {
        let c = default_camera();
        let r = c.extrinsic.rotation.matrix();
        Self {
            fx: c.fx(),
            fy: c.fy(),
            cx: c.cx(),
            cy: c.cy(),
            width: c.width,
            height: c.height,
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
            translation: [0.0; 3],
        }
    }
}

impl CameraConfig {
    pub fn model(&self) -> Result<CameraModel, ConfigError> {
        let r = Matrix3::from_fn(|i, j| self.rotation[i][j]);
        if (r.transpose() * r - Matrix3::identity()).amax() > 1e-6 || r.determinant() < 0.0 {
            return Err(ConfigError::Invalid("camera rotation is not a rotation matrix".into()));
        }
        let ext = Pose3::new(Rot3::from_matrix(&r), Vector3::from(self.translation));
        CameraModel::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height, ext).map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub imu_rate: f64,
    pub noise: SimNoise,
    pub accel_bias: [f64; 3],
    pub gyro_bias: [f64; 3],
    pub feature_rate: f64,
    pub feature_jitter: f64,
    pub track_lifetime: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        let r = SensorRig::default();
        Self {
            imu_rate: r.imu_rate,
            noise: r.noise,
            accel_bias: [0.0; 3],
            gyro_bias: [0.0; 3],
            feature_rate: r.feature_rate,
            feature_jitter: r.feature_jitter,
            track_lifetime: r.track_lifetime,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    pub horizon: f64,
    pub deltas: Vec<f64>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { horizon: 5.0, deltas: DEFAULT_DELTAS.to_vec() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub init: InitMode,
    pub trajectory: TrajectorySpec,
    pub sim: SimConfig,
    pub camera: CameraConfig,
    pub landmarks: LandmarkField,
    pub window: WindowConfig,
    pub evaluation: EvaluationConfig,
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_owned(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn rig(&self) -> Result<SensorRig, ConfigError> {
        Ok(SensorRig {
            camera: self.camera.model()?,
            imu_rate: self.sim.imu_rate,
            noise: self.sim.noise,
            gravity: self.window.noise.gravity,
            bias: ImuBias::new(Vector3::from(self.sim.accel_bias), Vector3::from(self.sim.gyro_bias)),
            feature_rate: self.sim.feature_rate,
            feature_jitter: self.sim.feature_jitter,
            track_lifetime: self.sim.track_lifetime,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.trajectory.validate().map_err(|e| invalid(&e))?;
        self.rig()?.validate().map_err(|e| invalid(&e))?;
        self.window.validate().map_err(|e| invalid(&e))?;
        if (0..3).any(|i| !(self.landmarks.max[i] > self.landmarks.min[i])) {
            return Err(ConfigError::Invalid("landmark box is empty".into()));
        }
        if !(self.evaluation.horizon > 0.0) || self.evaluation.deltas.iter().any(|d| !(*d > 0.0)) {
            return Err(ConfigError::Invalid("evaluation horizon and deltas must be positive".into()));
        }
        Ok(())
    }
}
