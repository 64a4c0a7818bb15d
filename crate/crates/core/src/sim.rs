//! Synthetic scenarios: analytic trajectories, IMU streams and asynchronous
//! feature tracks.

use std::collections::BTreeSet;
use std::f64::consts::TAU;

use nalgebra::{Matrix3, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imu_preint::{ImuBias, ImuSample};
use crate::lie::{so3_right_jacobian, Pose3, Rot3, Twist};
use crate::par::{self, Execution};
use crate::visual::{project, CameraModel, FeatureObservation, Landmark};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Invalid(&'static str),
    #[error("time {t} outside [0, {duration}]")]
    OutOfRange { t: f64, duration: f64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    ConstantTwist,
    #[default]
    Sinusoidal6dof,
    FigureEight,
    PiecewiseSmooth,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    pub duration: f64,
    /// Per-axis position amplitude (m).
    pub position_amplitude: Vector3<f64>,
    /// Per-axis rotation-vector amplitude (rad).
    pub rotation_amplitude: Vector3<f64>,
    /// Base frequency (Hz); axes run at fixed multiples of it.
    pub frequency: f64,
    /// Body twist `[v, w]` of the constant-twist kind.
    pub twist: Vector6<f64>,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            kind: TrajectoryKind::Sinusoidal6dof,
            duration: 10.0,
            position_amplitude: Vector3::new(0.6, 0.8, 0.4),
            rotation_amplitude: Vector3::new(0.15, 0.12, 0.2),
            frequency: 0.25,
            twist: Vector6::new(0.5, 0.0, 0.0, 0.0, 0.0, 0.1),
        }
    }
}

/// Ground-truth kinematics at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub pose: Pose3,
    /// Body-frame twist `[v, w]`.
    pub velocity: Twist,
    /// Specific force in the body frame, `R^T (a_world - g)`.
    pub specific_force: Vector3<f64>,
}

impl GroundTruth {
    pub fn world_velocity(&self) -> Vector3<f64> {
        self.pose.rotation.rotate(&self.velocity.linear())
    }
}

const POS_RATES: [f64; 3] = [1.0, 1.3, 0.7];
const ROT_RATES: [f64; 3] = [0.9, 1.1, 0.6];
const PHASES: [f64; 3] = [0.3, 1.1, 2.0];
/// Waypoint spacing of the piecewise kind, in base periods.
const SEGMENT_PERIODS: f64 = 0.5;

// Value, first and second derivative of a scalar signal.
type Jet = (f64, f64, f64);

fn sine(amp: f64, freq: f64, phase: f64, t: f64) -> Jet {
    let w = TAU * freq;
    let (s, c) = (w * t + phase).sin_cos();
    (amp * s, amp * w * c, -amp * w * w * s)
}

fn waypoint(axis: usize, i: i64, amp: f64) -> f64 {
    let x = i as f64;
    amp * (1.7 * x + PHASES[axis]).sin() * (0.6 + 0.4 * (0.9 * x * (axis as f64 + 1.0)).cos())
}

// Quintic blend between waypoints: zero velocity and acceleration at each
// waypoint keeps the whole path twice differentiable.
fn piecewise(axis: usize, amp: f64, seg: f64, t: f64) -> Jet {
    let i = (t / seg).floor();
    let u = t / seg - i;
    let (a, b) = (waypoint(axis, i as i64, amp), waypoint(axis, i as i64 + 1, amp));
    let s = u * u * u * (10.0 - 15.0 * u + 6.0 * u * u);
    let ds = 30.0 * u * u * (1.0 - u) * (1.0 - u) / seg;
    let dds = 60.0 * u * (1.0 - u) * (1.0 - 2.0 * u) / (seg * seg);
    let d = b - a;
    (a + d * s, d * ds, d * dds)
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(SimError::Invalid("duration must be positive"));
        }
        if !(self.frequency > 0.0 && self.frequency.is_finite()) {
            return Err(SimError::Invalid("frequency must be positive"));
        }
        if !(self.position_amplitude.iter().chain(self.rotation_amplitude.iter()).chain(self.twist.iter()).all(|x| x.is_finite())) {
            return Err(SimError::Invalid("amplitudes must be finite"));
        }
        if self.rotation_amplitude.norm() >= 1.5 {
            return Err(SimError::Invalid("rotation amplitude too large"));
        }
        Ok(())
    }

    // Position and rotation-vector jets per axis for the smooth kinds.
    fn jets(&self, t: f64) -> ([Jet; 3], [Jet; 3]) {
        let f = self.frequency;
        let (pa, ra) = (self.position_amplitude, self.rotation_amplitude);
        match self.kind {
            TrajectoryKind::FigureEight => {
                let y = sine(pa.y, f, 0.0, t);
                let z = sine(pa.z, 2.0 * f, 0.0, t);
                let x = sine(pa.x, f, PHASES[0], t);
                let rot = std::array::from_fn(|i| sine(ra[i], f * ROT_RATES[i], PHASES[i], t));
                ([x, y, z], rot)
            }
            TrajectoryKind::PiecewiseSmooth => {
                let seg = SEGMENT_PERIODS / f;
                (
                    std::array::from_fn(|i| piecewise(i, pa[i], seg, t)),
                    std::array::from_fn(|i| piecewise(i, ra[i], seg * 1.3, t)),
                )
            }
            _ => (
                std::array::from_fn(|i| sine(pa[i], f * POS_RATES[i], PHASES[i], t)),
                std::array::from_fn(|i| sine(ra[i], f * ROT_RATES[i], PHASES[i] + 0.5, t)),
            ),
        }
    }

    /// Closed-form pose, body twist and specific force at `t`.
    pub fn ground_truth(&self, t: f64, gravity: &Vector3<f64>) -> Result<GroundTruth, SimError> {
        if !(t >= -1e-12 && t <= self.duration + 1e-12) {
            return Err(SimError::OutOfRange { t, duration: self.duration });
        }
        if self.kind == TrajectoryKind::ConstantTwist {
            let v = self.twist.fixed_rows::<3>(0).into_owned();
            let w = self.twist.fixed_rows::<3>(3).into_owned();
            let pose = Pose3::exp(&(self.twist * t));
            // World acceleration R (w x v); body frame accel is w x v.
            let specific_force = w.cross(&v) - pose.rotation.inverse().rotate(gravity);
            return Ok(GroundTruth { pose, velocity: Twist::new(v, w), specific_force });
        }
        let (p, r) = self.jets(t);
        let pos = Vector3::new(p[0].0, p[1].0, p[2].0);
        let vel = Vector3::new(p[0].1, p[1].1, p[2].1);
        let acc = Vector3::new(p[0].2, p[1].2, p[2].2);
        let phi = Vector3::new(r[0].0, r[1].0, r[2].0);
        let phi_dot = Vector3::new(r[0].1, r[1].1, r[2].1);
        let rot = Rot3::exp(&phi);
        let rt = rot.inverse();
        let omega: Vector3<f64> = so3_right_jacobian(&phi) * phi_dot;
        Ok(GroundTruth {
            pose: Pose3::new(rot, pos),
            velocity: Twist::new(rt.rotate(&vel), omega),
            specific_force: rt.rotate(&(acc - gravity)),
        })
    }

    /// Total distance travelled, by dense sampling.
    pub fn path_length(&self, gravity: &Vector3<f64>) -> f64 {
        let n = ((self.duration * 1000.0).ceil() as usize).max(2);
        let mut last = self.ground_truth(0.0, gravity).map(|g| g.pose.translation).unwrap_or_default();
        let mut total = 0.0;
        for i in 1..=n {
            let p = self.ground_truth(self.duration * i as f64 / n as f64, gravity).map(|g| g.pose.translation).unwrap_or(last);
            total += (p - last).norm();
            last = p;
        }
        total
    }
}

/// Sensor noise of the simulator; zeros give exact measurements.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimNoise {
    pub gyro_noise_density: f64,
    pub accel_noise_density: f64,
    pub gyro_bias_walk: f64,
    pub accel_bias_walk: f64,
    pub pixel_sigma: f64,
}

impl Default for SimNoise {
    fn default() -> Self {
        Self { gyro_noise_density: 1e-3, accel_noise_density: 1e-2, gyro_bias_walk: 1e-5, accel_bias_walk: 1e-4, pixel_sigma: 1.0 }
    }
}

impl SimNoise {
    pub fn zero() -> Self {
        Self { gyro_noise_density: 0.0, accel_noise_density: 0.0, gyro_bias_walk: 0.0, accel_bias_walk: 0.0, pixel_sigma: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorRig {
    pub camera: CameraModel,
    pub imu_rate: f64,
    pub noise: SimNoise,
    pub gravity: Vector3<f64>,
    /// True biases at `t = 0`.
    pub bias: ImuBias,
    /// Mean observations per second of a visible track.
    pub feature_rate: f64,
    /// Relative jitter of the inter-observation gap, in `[0, 1)`.
    pub feature_jitter: f64,
    /// Mean lifetime of a track before it is re-detected under a new id.
    pub track_lifetime: f64,
}

/// Forward-looking camera on the body x axis: camera z = body x,
/// camera x = -body y, camera y = -body z.
pub fn default_camera() -> CameraModel {
    let r_bc = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    CameraModel::new(320.0, 320.0, 320.0, 240.0, 640.0, 480.0, Pose3::new(Rot3::from_matrix(&r_bc), Vector3::zeros()))
        .expect("default intrinsics are valid")
}

impl Default for SensorRig {
    fn default() -> Self {
        Self {
            camera: default_camera(),
            imu_rate: 200.0,
            noise: SimNoise::default(),
            gravity: Vector3::new(0.0, 0.0, -9.81),
            bias: ImuBias::zero(),
            feature_rate: 20.0,
            feature_jitter: 0.5,
            track_lifetime: 3.0,
        }
    }
}

impl SensorRig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.imu_rate > 0.0 && self.feature_rate > 0.0 && self.track_lifetime > 0.0) {
            return Err(SimError::Invalid("rates and lifetimes must be positive"));
        }
        if !(0.0..1.0).contains(&self.feature_jitter) {
            return Err(SimError::Invalid("feature_jitter must lie in [0, 1)"));
        }
        let n = &self.noise;
        if [n.gyro_noise_density, n.accel_noise_density, n.gyro_bias_walk, n.accel_bias_walk, n.pixel_sigma]
            .iter()
            .any(|x| !(*x >= 0.0 && x.is_finite()))
        {
            return Err(SimError::Invalid("noise levels must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LandmarkField {
    pub count: usize,
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Default for LandmarkField {
    fn default() -> Self {
        Self { count: 60, min: Vector3::new(4.0, -5.0, -3.0), max: Vector3::new(10.0, 5.0, 3.0) }
    }
}

impl LandmarkField {
    /// Uniform points in the box, ids `0..count`.
    pub fn generate(&self, seed: u64) -> Result<Vec<Landmark>, SimError> {
        if (0..3).any(|i| !(self.max[i] > self.min[i])) {
            return Err(SimError::Invalid("landmark box is empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok((0..self.count as u64)
            .map(|id| {
                let position = Vector3::from_fn(|i, _| rng.random_range(self.min[i]..self.max[i]));
                Landmark { id, position }
            })
            .collect())
    }
}

/// True bias at each IMU stamp.
pub fn bias_trajectory(spec: &TrajectorySpec, rig: &SensorRig, seed: u64) -> Vec<(f64, ImuBias)> {
    let n = (spec.duration * rig.imu_rate).floor() as usize + 1;
    let dt = 1.0 / rig.imu_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut bias = rig.bias;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push((i as f64 * dt, bias));
        let g: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
        let a: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
        bias.gyro_bias += g * (rig.noise.gyro_bias_walk * dt.sqrt());
        bias.accel_bias += a * (rig.noise.accel_bias_walk * dt.sqrt());
    }
    out
}

/// IMU samples at `imu_rate` over the whole duration:
/// `gyro = w + b_g + n_g`, `accel = R^T (a - g) + b_a + n_a`.
pub fn synthesize_imu(spec: &TrajectorySpec, rig: &SensorRig, seed: u64) -> Result<Vec<ImuSample>, SimError> {
    spec.validate()?;
    rig.validate()?;
    let biases = bias_trajectory(spec, rig, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let sg = rig.noise.gyro_noise_density * rig.imu_rate.sqrt();
    let sa = rig.noise.accel_noise_density * rig.imu_rate.sqrt();
    let mut out = Vec::with_capacity(biases.len());
    for (t, b) in biases {
        let gt = spec.ground_truth(t, &rig.gravity)?;
        let ng: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
        let na: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
        out.push(ImuSample::new(
            t,
            gt.velocity.angular() + b.gyro_bias + ng * sg,
            gt.specific_force + b.accel_bias + na * sa,
        ));
    }
    Ok(out)
}

/// Track ids encode the landmark and the re-detection count.
pub const TRACK_ID_STRIDE: u64 = 1 << 20;

pub fn landmark_of_track(track_id: u64) -> u64 {
    track_id / TRACK_ID_STRIDE
}

// Raw schedule of one landmark: track id, stamp and pixel noise. Pixels are
// filled in once stamps are final.
fn track_landmark(spec: &TrajectorySpec, rig: &SensorRig, landmark: &Landmark, seed: u64) -> Vec<FeatureObservation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(16 + landmark.id);
    let pixel_noise = Normal::new(0.0, rig.noise.pixel_sigma).expect("finite sigma");
    let gap = 1.0 / rig.feature_rate;
    let mut out = Vec::new();
    let mut t = rng.random_range(0.0..gap);
    let mut segment = 0u64;
    let mut started: Option<f64> = None;
    let mut lifetime = 0.0;
    while t <= spec.duration {
        let gt = spec.ground_truth(t, &rig.gravity).expect("t inside duration");
        let seen = project(&gt.pose, &rig.camera, landmark).is_ok_and(|(px, _)| rig.camera.in_image(&px));
        if seen {
            if started.is_some_and(|s| t - s > lifetime) {
                segment += 1;
                started = None;
            }
            if started.is_none() {
                started = Some(t);
                lifetime = rig.track_lifetime * rng.random_range(0.5..1.5);
            }
            let noise = Vector2::new(pixel_noise.sample(&mut rng), pixel_noise.sample(&mut rng));
            out.push(FeatureObservation { track_id: landmark.id * TRACK_ID_STRIDE + segment, stamp: t, pixel: noise });
        } else if started.take().is_some() {
            segment += 1;
        }
        t += gap * (1.0 + rig.feature_jitter * rng.random_range(-1.0..1.0));
    }
    out
}

/// Asynchronous pixel observations of `landmarks`, sorted by stamp. Stamps
/// are multiples of 1 ns and unique across all tracks.
pub fn synthesize_tracks(
    spec: &TrajectorySpec,
    rig: &SensorRig,
    landmarks: &[Landmark],
    seed: u64,
    exec: Execution,
) -> Result<Vec<FeatureObservation>, SimError> {
    spec.validate()?;
    rig.validate()?;
    let per_landmark = par::map(exec, landmarks, |l| track_landmark(spec, rig, l, seed));
    let mut used = BTreeSet::new();
    let mut out = Vec::new();
    for (l, raw) in landmarks.iter().zip(per_landmark) {
        for obs in raw {
            let mut ns = (obs.stamp * 1e9).round() as i64;
            while !used.insert(ns) {
                ns += 1;
            }
            let stamp = ns as f64 * 1e-9;
            if stamp > spec.duration {
                continue;
            }
            let gt = spec.ground_truth(stamp, &rig.gravity)?;
            let Ok((px, _)) = project(&gt.pose, &rig.camera, l) else { continue };
            out.push(FeatureObservation { stamp, pixel: px + obs.pixel, ..obs });
        }
    }
    out.sort_by(|a, b| a.stamp.total_cmp(&b.stamp));
    Ok(out)
}
