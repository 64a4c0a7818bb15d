//! Classical on-manifold IMU preintegration.
//!
//! Error-state ordering for [`ImuState`] is `[rho, phi, v, b_a, b_g]`
//! (15 entries): the pose is perturbed on the right through the SE(3)
//! exponential, velocity and biases additively. Residual rows follow
//! `[r_R, r_v, r_p, r_ba, r_bg]`.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::{hat, so3_right_jacobian, so3_right_jacobian_inv, Pose3, Rot3};

pub type Vector15 = SVector<f64, 15>;
pub type Matrix15 = SMatrix<f64, 15, 15>;
pub type Matrix9 = SMatrix<f64, 9, 9>;

/// Stamp tolerance when matching a preintegration to its states.
pub const STAMP_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImuError {
    #[error("need at least 2 IMU samples, got {0}")]
    TooFewSamples(usize),
    #[error("IMU stamps not strictly increasing at sample {0}")]
    NonMonotone(usize),
    #[error("IMU stream [{have_start}, {have_end}] does not cover [{want_start}, {want_end}]")]
    Coverage { have_start: f64, have_end: f64, want_start: f64, want_end: f64 },
    #[error("preintegration spans [{preint_start}, {preint_end}] but states are at {state_start} and {state_end}")]
    Association { preint_start: f64, preint_end: f64, state_start: f64, state_end: f64 },
    #[error("noise densities must be positive and finite")]
    InvalidNoise,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub stamp: f64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

impl ImuSample {
    pub fn new(stamp: f64, gyro: Vector3<f64>, accel: Vector3<f64>) -> Self {
        Self { stamp, gyro, accel }
    }

    fn lerp(&self, other: &ImuSample, t: f64) -> ImuSample {
        let s = (t - self.stamp) / (other.stamp - self.stamp);
        ImuSample {
            stamp: t,
            gyro: self.gyro + (other.gyro - self.gyro) * s,
            accel: self.accel + (other.accel - self.accel) * s,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImuBias {
    pub accel_bias: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
}

impl ImuBias {
    pub fn new(accel_bias: Vector3<f64>, gyro_bias: Vector3<f64>) -> Self {
        Self { accel_bias, gyro_bias }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// Whether `other` has drifted far enough from `self` to warrant
    /// re-integrating measurements linearized at `self`.
    pub fn needs_reintegration(&self, other: &ImuBias) -> bool {
        (self.gyro_bias - other.gyro_bias).amax() > 1e-3 || (self.accel_bias - other.accel_bias).amax() > 1e-2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuState {
    pub stamp: f64,
    pub pose: Pose3,
    pub velocity: Vector3<f64>,
    pub bias: ImuBias,
}

impl ImuState {
    pub fn new(stamp: f64, pose: Pose3, velocity: Vector3<f64>, bias: ImuBias) -> Self {
        Self { stamp, pose, velocity, bias }
    }

    pub fn retract(&self, delta: &Vector15) -> Self {
        let dpose = delta.fixed_rows::<6>(0).into_owned();
        Self {
            stamp: self.stamp,
            pose: self.pose.retract(&dpose),
            velocity: self.velocity + delta.fixed_rows::<3>(6),
            bias: ImuBias {
                accel_bias: self.bias.accel_bias + delta.fixed_rows::<3>(9),
                gyro_bias: self.bias.gyro_bias + delta.fixed_rows::<3>(12),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImuNoiseConfig {
    /// rad/s/sqrt(Hz)
    pub gyro_noise_density: f64,
    /// m/s^2/sqrt(Hz)
    pub accel_noise_density: f64,
    pub gyro_bias_walk: f64,
    pub accel_bias_walk: f64,
    pub gravity: Vector3<f64>,
}

impl Default for ImuNoiseConfig {
    fn default() -> Self {
        Self {
            gyro_noise_density: 1e-3,
            accel_noise_density: 1e-2,
            gyro_bias_walk: 1e-5,
            accel_bias_walk: 1e-4,
            gravity: Vector3::new(0.0, 0.0, -9.81),
        }
    }
}

impl ImuNoiseConfig {
    pub fn validate(&self) -> Result<(), ImuError> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if ok(self.gyro_noise_density)
            && ok(self.accel_noise_density)
            && ok(self.gyro_bias_walk)
            && ok(self.accel_bias_walk)
            && self.gravity.iter().all(|g| g.is_finite())
        {
            Ok(())
        } else {
            Err(ImuError::InvalidNoise)
        }
    }
}

/// Relative motion increments between two knots, expressed in the frame of
/// the first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreintegratedImu {
    pub start_stamp: f64,
    pub delta_r: Rot3,
    pub delta_v: Vector3<f64>,
    pub delta_p: Vector3<f64>,
    pub dt_total: f64,
    /// Covariance of `[dR, dv, dp]`.
    pub covariance: Matrix9,
    pub bias_lin: ImuBias,
    pub noise: ImuNoiseConfig,
}

impl PreintegratedImu {
    pub fn end_stamp(&self) -> f64 {
        self.start_stamp + self.dt_total
    }

    /// Block-diagonal covariance of the full 15-row residual.
    pub fn residual_covariance(&self) -> Matrix15 {
        let mut out = Matrix15::zeros();
        out.fixed_view_mut::<9, 9>(0, 0).copy_from(&self.covariance);
        let wa = self.noise.accel_bias_walk.powi(2) * self.dt_total;
        let wg = self.noise.gyro_bias_walk.powi(2) * self.dt_total;
        for i in 0..3 {
            out[(9 + i, 9 + i)] = wa;
            out[(12 + i, 12 + i)] = wg;
        }
        out
    }
}

fn check_stream(samples: &[ImuSample]) -> Result<(), ImuError> {
    if samples.len() < 2 {
        return Err(ImuError::TooFewSamples(samples.len()));
    }
    for (i, w) in samples.windows(2).enumerate() {
        if !(w[1].stamp > w[0].stamp) {
            return Err(ImuError::NonMonotone(i + 1));
        }
    }
    Ok(())
}

/// Samples covering exactly `[t0, t1]`, with the end points linearly
/// interpolated from the neighbouring raw samples.
pub fn samples_between(stream: &[ImuSample], t0: f64, t1: f64) -> Result<Vec<ImuSample>, ImuError> {
    check_stream(stream)?;
    let (first, last) = (stream[0].stamp, stream[stream.len() - 1].stamp);
    if !(t0 < t1) || t0 < first || t1 > last {
        return Err(ImuError::Coverage { have_start: first, have_end: last, want_start: t0, want_end: t1 });
    }
    let at = |t: f64| -> ImuSample {
        let i = stream.partition_point(|s| s.stamp <= t);
        if i == 0 {
            return stream[0];
        }
        let prev = &stream[i - 1];
        if prev.stamp == t || i == stream.len() {
            return ImuSample { stamp: t, ..*prev };
        }
        prev.lerp(&stream[i], t)
    };
    let lo = stream.partition_point(|s| s.stamp <= t0);
    let hi = stream.partition_point(|s| s.stamp < t1);
    let mut out = Vec::with_capacity(hi.saturating_sub(lo) + 2);
    out.push(at(t0));
    out.extend_from_slice(&stream[lo..hi]);
    out.push(at(t1));
    Ok(out)
}

/// Midpoint preintegration of `samples` at the fixed bias `bias_lin`.
pub fn integrate(samples: &[ImuSample], bias_lin: ImuBias, noise: ImuNoiseConfig) -> Result<PreintegratedImu, ImuError> {
    check_stream(samples)?;
    noise.validate()?;
    let mut dr = Rot3::identity();
    let mut dv = Vector3::zeros();
    let mut dp = Vector3::zeros();
    let mut cov = Matrix9::zeros();
    let gyro_var = noise.gyro_noise_density.powi(2);
    let accel_var = noise.accel_noise_density.powi(2);

    for w in samples.windows(2) {
        let dt = w[1].stamp - w[0].stamp;
        let omega = (w[0].gyro + w[1].gyro) * 0.5 - bias_lin.gyro_bias;
        let step = Rot3::exp(&(omega * dt));
        let dr_next = dr * step;
        let a0 = w[0].accel - bias_lin.accel_bias;
        let a1 = w[1].accel - bias_lin.accel_bias;
        let acc = (dr.rotate(&a0) + dr_next.rotate(&a1)) * 0.5;

        // First-order error propagation for [dR, dv, dp].
        let r = *dr.matrix();
        let a_hat = hat(&((a0 + a1) * 0.5));
        let mut a = Matrix9::identity();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&step.matrix().transpose());
        a.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-r * a_hat * dt));
        a.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-r * a_hat * (0.5 * dt * dt)));
        a.fixed_view_mut::<3, 3>(6, 3).copy_from(&(Matrix3::identity() * dt));
        // Discrete noise of a white-noise accel integrated over dt; the
        // isotropic accel block is invariant under the rotation by dr.
        let jr = so3_right_jacobian(&(omega * dt));
        let mut qd = Matrix9::zeros();
        qd.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jr * jr.transpose() * (gyro_var * dt)));
        for i in 0..3 {
            qd[(3 + i, 3 + i)] = accel_var * dt;
            qd[(3 + i, 6 + i)] = accel_var * dt * dt / 2.0;
            qd[(6 + i, 3 + i)] = accel_var * dt * dt / 2.0;
            qd[(6 + i, 6 + i)] = accel_var * dt.powi(3) / 3.0;
        }
        cov = a * cov * a.transpose() + qd;

        dp += dv * dt + acc * (0.5 * dt * dt);
        dv += acc * dt;
        dr = Rot3::from_matrix(dr_next.matrix());
    }
    cov = (cov + cov.transpose()) * 0.5;

    Ok(PreintegratedImu {
        start_stamp: samples[0].stamp,
        delta_r: dr,
        delta_v: dv,
        delta_p: dp,
        dt_total: samples[samples.len() - 1].stamp - samples[0].stamp,
        covariance: cov,
        bias_lin,
        noise,
    })
}

fn check_association(xk: &ImuState, xk1: &ImuState, preint: &PreintegratedImu) -> Result<(), ImuError> {
    if (xk.stamp - preint.start_stamp).abs() > STAMP_TOL || (xk1.stamp - preint.end_stamp()).abs() > STAMP_TOL {
        return Err(ImuError::Association {
            preint_start: preint.start_stamp,
            preint_end: preint.end_stamp(),
            state_start: xk.stamp,
            state_end: xk1.stamp,
        });
    }
    Ok(())
}

/// IMU residual with Jacobians with respect to both states.
#[derive(Clone, Debug)]
pub struct ImuLinearization {
    pub residual: Vector15,
    pub jac_k: Matrix15,
    pub jac_k1: Matrix15,
}

pub fn residual(
    xk: &ImuState,
    xk1: &ImuState,
    preint: &PreintegratedImu,
    noise: &ImuNoiseConfig,
) -> Result<ImuLinearization, ImuError> {
    check_association(xk, xk1, preint)?;
    Ok(residual_unchecked(xk, xk1, preint, noise))
}

/// Residual without the stamp association check; used when the increments
/// come from a source whose span is already known to match.
pub fn residual_unchecked(
    xk: &ImuState,
    xk1: &ImuState,
    preint: &PreintegratedImu,
    noise: &ImuNoiseConfig,
) -> ImuLinearization {
    let dt = preint.dt_total;
    let g = noise.gravity;
    let rk = *xk.pose.rotation.matrix();
    let rk1 = *xk1.pose.rotation.matrix();
    let rkt = rk.transpose();
    let (p0, p1) = (xk.pose.translation, xk1.pose.translation);
    let (v0, v1) = (xk.velocity, xk1.velocity);

    let err_rot = preint.delta_r.inverse() * xk.pose.rotation.inverse() * xk1.pose.rotation;
    let r_r = err_rot.log();
    let dv_world = v1 - v0 - g * dt;
    let dp_world = p1 - p0 - v0 * dt - g * (0.5 * dt * dt);
    let r_v = rkt * dv_world - preint.delta_v;
    let r_p = rkt * dp_world - preint.delta_p;

    let mut res = Vector15::zeros();
    res.fixed_rows_mut::<3>(0).copy_from(&r_r);
    res.fixed_rows_mut::<3>(3).copy_from(&r_v);
    res.fixed_rows_mut::<3>(6).copy_from(&r_p);
    res.fixed_rows_mut::<3>(9).copy_from(&(xk1.bias.accel_bias - xk.bias.accel_bias));
    res.fixed_rows_mut::<3>(12).copy_from(&(xk1.bias.gyro_bias - xk.bias.gyro_bias));

    let jr_inv = so3_right_jacobian_inv(&r_r);
    let eye = Matrix3::identity();
    let mut jk = Matrix15::zeros();
    let mut jk1 = Matrix15::zeros();
    // rotation rows
    jk.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-jr_inv * rk1.transpose() * rk));
    jk1.fixed_view_mut::<3, 3>(0, 3).copy_from(&jr_inv);
    // velocity rows
    jk.fixed_view_mut::<3, 3>(3, 3).copy_from(&hat(&(rkt * dv_world)));
    jk.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-rkt));
    jk1.fixed_view_mut::<3, 3>(3, 6).copy_from(&rkt);
    // position rows
    jk.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-eye));
    jk.fixed_view_mut::<3, 3>(6, 3).copy_from(&hat(&(rkt * dp_world)));
    jk.fixed_view_mut::<3, 3>(6, 6).copy_from(&(-rkt * dt));
    jk1.fixed_view_mut::<3, 3>(6, 0).copy_from(&(rkt * rk1));
    // bias rows
    for i in 9..15 {
        jk[(i, i)] = -1.0;
        jk1[(i, i)] = 1.0;
    }
    ImuLinearization { residual: res, jac_k: jk, jac_k1: jk1 }
}

/// State at the end of `preint` that zeroes the residual, biases carried
/// forward.
pub fn predict(xk: &ImuState, preint: &PreintegratedImu, noise: &ImuNoiseConfig) -> ImuState {
    let dt = preint.dt_total;
    let g = noise.gravity;
    let r = xk.pose.rotation;
    ImuState {
        stamp: xk.stamp + dt,
        pose: Pose3::new(
            Rot3::from_matrix(&(r * preint.delta_r).matrix().clone_owned()),
            xk.pose.translation + xk.velocity * dt + g * (0.5 * dt * dt) + r.rotate(&preint.delta_p),
        ),
        velocity: xk.velocity + g * dt + r.rotate(&preint.delta_v),
        bias: xk.bias,
    }
}
