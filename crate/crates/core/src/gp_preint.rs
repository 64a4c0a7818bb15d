//! Preintegration by Gaussian-process regression on latent states.
//!
//! The rotation-vector rate and the anchor-frame acceleration are modelled
//! as independent GPs with squared-exponential kernels around an affine
//! mean fitted to the latent targets by least squares, so constant and
//! linearly varying inputs are reproduced exactly. Latent
//! observations are placed uniformly over the span; preintegrated
//! quantities at any query time are linear functionals (single and double
//! integrals) of the posterior mean, available in closed form via `erf`.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imu_preint::{ImuBias, ImuError, ImuNoiseConfig, ImuSample, ImuState, Matrix9, PreintegratedImu};
use crate::lie::{hat, so3_right_jacobian, Pose3, Rot3};

pub type Matrix6x15 = SMatrix<f64, 6, 15>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("invalid kernel configuration: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Stream(#[from] ImuError),
    #[error("latent fit did not converge after {iters} iterations (last change {change:e})")]
    NotConverged { iters: usize, change: f64 },
    #[error("rotation excursion {angle} rad reaches the log singularity")]
    Singularity { angle: f64 },
    #[error("query {tau} outside latent span [{start}, {end}]")]
    Extrapolation { tau: f64, start: f64, end: f64 },
    #[error("kernel matrix is not positive definite")]
    Factorization,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpKernelConfig {
    /// Rotation-rate kernel lengthscale; `None` uses three times the mean
    /// IMU sample spacing.
    pub lengthscale_r: Option<f64>,
    /// Rotation-rate kernel variance; `None` uses the mean square of the
    /// latent targets.
    pub variance_r: Option<f64>,
    pub lengthscale_a: Option<f64>,
    pub variance_a: Option<f64>,
    pub sigma_r: f64,
    pub sigma_a: f64,
    pub num_latent: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for GpKernelConfig {
    fn default() -> Self {
        Self {
            lengthscale_r: None,
            variance_r: None,
            lengthscale_a: None,
            variance_a: None,
            sigma_r: 0.02,
            sigma_a: 0.2,
            num_latent: 400,
            max_iters: 10,
            tol: 1e-8,
        }
    }
}

/// Practical cap on latent states per fit (dense cubic factorization).
pub const MAX_LATENT: usize = 4000;

impl GpKernelConfig {
    pub fn validate(&self) -> Result<(), GpError> {
        let pos = |x: Option<f64>| x.is_none_or(|v| v.is_finite() && v > 0.0);
        if !(pos(self.lengthscale_r) && pos(self.lengthscale_a)) {
            return Err(GpError::InvalidConfig("lengthscales must be positive"));
        }
        if !(pos(self.variance_r) && pos(self.variance_a)) {
            return Err(GpError::InvalidConfig("variances must be positive"));
        }
        if !(self.sigma_r > 0.0 && self.sigma_a > 0.0) {
            return Err(GpError::InvalidConfig("noise std must be positive"));
        }
        if self.num_latent < 2 || self.num_latent > MAX_LATENT {
            return Err(GpError::InvalidConfig("num_latent out of range"));
        }
        if self.max_iters == 0 || !(self.tol > 0.0) {
            return Err(GpError::InvalidConfig("max_iters and tol must be positive"));
        }
        Ok(())
    }
}

/// Squared-exponential kernel `variance * exp(-(s - t)^2 / (2 l^2))` with
/// closed-form integral operators over `[a, tau]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeKernel {
    pub lengthscale: f64,
    pub variance: f64,
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

// Antiderivative of erf: x erf(x) + exp(-x^2)/sqrt(pi).
fn erf_antideriv(x: f64) -> f64 {
    x * erf(x) + (-x * x).exp() / PI.sqrt()
}

impl SeKernel {
    pub fn eval(&self, s: f64, t: f64) -> f64 {
        let d = (s - t) / self.lengthscale;
        self.variance * (-0.5 * d * d).exp()
    }

    fn c(&self) -> f64 {
        std::f64::consts::SQRT_2 * self.lengthscale
    }

    fn scale(&self) -> f64 {
        self.variance * self.lengthscale * (PI / 2.0).sqrt()
    }

    /// `int_a^tau k(s, t) ds`
    pub fn single(&self, a: f64, tau: f64, t: f64) -> f64 {
        let c = self.c();
        self.scale() * (erf((tau - t) / c) - erf((a - t) / c))
    }

    /// `int_a^tau int_a^u k(s, t) ds du = int_a^tau (tau - s) k(s, t) ds`
    pub fn double(&self, a: f64, tau: f64, t: f64) -> f64 {
        let c = self.c();
        let (xa, xt) = ((a - t) / c, (tau - t) / c);
        self.scale() * (c * (erf_antideriv(xt) - erf_antideriv(xa)) - (tau - a) * erf(xa))
    }

    /// Prior covariance of the single integral with itself.
    pub fn single_single(&self, a: f64, tau: f64) -> f64 {
        let d = tau - a;
        let l = self.lengthscale;
        2.0 * self.variance * (d * l * (PI / 2.0).sqrt() * erf(d / self.c()) - l * l * (1.0 - (-d * d / (2.0 * l * l)).exp()))
    }

    /// Prior covariances `(single x double, double x double)` by composite
    /// Gauss-Legendre quadrature over the outer integral.
    pub fn single_double_and_double_double(&self, a: f64, tau: f64) -> (f64, f64) {
        let sd = gauss_legendre(a, tau, self.lengthscale, |t| (tau - t) * self.single(a, tau, t));
        let dd = gauss_legendre(a, tau, self.lengthscale, |t| (tau - t) * self.double(a, tau, t));
        (sd, dd)
    }
}

const GL_NODES: [f64; 8] = [
    -0.960_289_856_497_536_3,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL_WEIGHTS: [f64; 8] = [
    0.101_228_536_290_376_26,
    0.222_381_034_453_374_47,
    0.313_706_645_877_887_3,
    0.362_683_783_378_362,
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_47,
    0.101_228_536_290_376_26,
];

/// Composite 8-point Gauss-Legendre over `[a, b]` with panels no wider
/// than `panel`.
pub fn gauss_legendre(a: f64, b: f64, panel: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let panels = ((b - a) / panel).ceil().max(1.0) as usize;
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let mid = a + h * (p as f64 + 0.5);
        for (x, w) in GL_NODES.iter().zip(GL_WEIGHTS.iter()) {
            total += w * 0.5 * h * f(mid + 0.5 * h * x);
        }
    }
    total
}

/// Latent GP model of one preintegration interval.
#[derive(Clone, Debug)]
pub struct LatentGpModel {
    pub anchor_stamp: f64,
    pub end_stamp: f64,
    pub latent_stamps: Vec<f64>,
    pub rho: Vec<Vector3<f64>>,
    pub alpha: Vec<Vector3<f64>>,
    pub kernel_r: SeKernel,
    pub kernel_a: SeKernel,
    pub sigma_r: f64,
    pub sigma_a: f64,
    pub bias: ImuBias,
    pub iterations: usize,
    /// Prior means of the two processes.
    pub trend_r: Trend,
    pub trend_a: Trend,
    gram_r: Cholesky<f64, Dyn>,
    gram_a: Cholesky<f64, Dyn>,
    weights_r: DMatrix<f64>,
    weights_a: DMatrix<f64>,
}

/// Preintegrated increments at a query time and their covariance, ordered
/// `[dr, dv, dp]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GpPreintQuery {
    pub delta_r: Vector3<f64>,
    pub delta_v: Vector3<f64>,
    pub delta_p: Vector3<f64>,
    pub query_covariance: Matrix9,
}

fn sample_at(samples: &[ImuSample], t: f64) -> ImuSample {
    let i = samples.partition_point(|s| s.stamp <= t);
    if i == 0 {
        return samples[0];
    }
    if i == samples.len() {
        return samples[i - 1];
    }
    let (p, n) = (&samples[i - 1], &samples[i]);
    let s = (t - p.stamp) / (n.stamp - p.stamp);
    ImuSample { stamp: t, gyro: p.gyro + (n.gyro - p.gyro) * s, accel: p.accel + (n.accel - p.accel) * s }
}

fn gram(kernel: &SeKernel, stamps: &[f64], sigma: f64) -> Result<Cholesky<f64, Dyn>, GpError> {
    let n = stamps.len();
    let k = DMatrix::from_fn(n, n, |i, j| kernel.eval(stamps[i], stamps[j]) + if i == j { sigma * sigma } else { 0.0 });
    Cholesky::new(k).ok_or(GpError::Factorization)
}

/// Affine prior mean `offset + slope (t - anchor)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Trend {
    pub offset: Vector3<f64>,
    pub slope: Vector3<f64>,
}

impl Trend {
    /// Least-squares line through `v` at elapsed times `s`.
    fn fit(s: &[f64], v: &[Vector3<f64>]) -> Self {
        let n = s.len() as f64;
        let s_mean = s.iter().sum::<f64>() / n;
        let v_mean = v.iter().sum::<Vector3<f64>>() / n;
        let var: f64 = s.iter().map(|x| (x - s_mean).powi(2)).sum();
        let slope = if var > 0.0 { s.iter().zip(v).map(|(x, y)| (y - v_mean) * (x - s_mean)).sum::<Vector3<f64>>() / var } else { Vector3::zeros() };
        Self { offset: v_mean - slope * s_mean, slope }
    }

    pub fn at(&self, s: f64) -> Vector3<f64> {
        self.offset + self.slope * s
    }

    /// Integral over `[0, d]`.
    pub fn single(&self, d: f64) -> Vector3<f64> {
        self.offset * d + self.slope * (0.5 * d * d)
    }

    /// Double integral over `[0, d]`.
    pub fn double(&self, d: f64) -> Vector3<f64> {
        self.offset * (0.5 * d * d) + self.slope * (d * d * d / 6.0)
    }
}

fn mean_square(v: &[Vector3<f64>]) -> f64 {
    v.iter().map(|x| x.norm_squared()).sum::<f64>() / (3.0 * v.len() as f64)
}

// Kernel weights for the targets with the trend removed.
fn weights(gram: &Cholesky<f64, Dyn>, s: &[f64], v: &[Vector3<f64>], m: &Trend) -> DMatrix<f64> {
    gram.solve(&DMatrix::from_fn(v.len(), 3, |i, j| v[i][j] - m.at(s[i])[j]))
}

/// Fits latent rotation-rate and acceleration states to `samples` at the
/// fixed bias `bias`.
pub fn fit_latent(samples: &[ImuSample], bias: ImuBias, cfg: &GpKernelConfig) -> Result<LatentGpModel, GpError> {
    cfg.validate()?;
    if samples.len() < 2 {
        return Err(ImuError::TooFewSamples(samples.len()).into());
    }
    for (i, w) in samples.windows(2).enumerate() {
        if !(w[1].stamp > w[0].stamp) {
            return Err(ImuError::NonMonotone(i + 1).into());
        }
    }
    let a = samples[0].stamp;
    let b = samples[samples.len() - 1].stamp;
    let n = cfg.num_latent;
    let stamps: Vec<f64> = (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect();
    let at: Vec<ImuSample> = stamps.iter().map(|&t| sample_at(samples, t)).collect();
    let default_l = 3.0 * (b - a) / (samples.len() - 1) as f64;

    let omega: Vec<Vector3<f64>> = at.iter().map(|s| s.gyro - bias.gyro_bias).collect();
    let kernel_r = SeKernel {
        lengthscale: cfg.lengthscale_r.unwrap_or(default_l),
        variance: cfg.variance_r.unwrap_or_else(|| mean_square(&omega).max(cfg.sigma_r * cfg.sigma_r)),
    };
    let gram_r = gram(&kernel_r, &stamps, cfg.sigma_r)?;
    // Rotation vector at each latent stamp from integrating the posterior
    // mean of the rotation rate.
    let integ = DMatrix::from_fn(n, n, |j, i| kernel_r.single(a, stamps[j], stamps[i]));
    let elapsed: Vec<f64> = stamps.iter().map(|t| t - a).collect();
    let integrate = |w: &DMatrix<f64>, m: &Trend| {
        let mut out = &integ * w;
        for (j, s) in elapsed.iter().enumerate() {
            let add = m.single(*s);
            for c in 0..3 {
                out[(j, c)] += add[c];
            }
        }
        out
    };

    let mut rho = omega.clone();
    let mut trend_r = Trend::fit(&elapsed, &rho);
    let mut weights_r = weights(&gram_r, &elapsed, &rho, &trend_r);
    let mut r_at = integrate(&weights_r, &trend_r);
    let mut iterations = 0;
    let mut change = f64::INFINITY;
    while iterations < cfg.max_iters {
        iterations += 1;
        let mut max_angle: f64 = 0.0;
        let next: Vec<Vector3<f64>> = (0..n)
            .map(|j| {
                let r = Vector3::new(r_at[(j, 0)], r_at[(j, 1)], r_at[(j, 2)]);
                max_angle = max_angle.max(r.norm());
                crate::lie::so3_right_jacobian_inv(&r) * omega[j]
            })
            .collect();
        if max_angle >= PI {
            return Err(GpError::Singularity { angle: max_angle });
        }
        change = next.iter().zip(&rho).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max);
        rho = next;
        trend_r = Trend::fit(&elapsed, &rho);
        weights_r = weights(&gram_r, &elapsed, &rho, &trend_r);
        r_at = integrate(&weights_r, &trend_r);
        if change < cfg.tol {
            break;
        }
    }
    if change >= cfg.tol {
        return Err(GpError::NotConverged { iters: iterations, change });
    }

    let alpha: Vec<Vector3<f64>> = (0..n)
        .map(|j| {
            let r = Vector3::new(r_at[(j, 0)], r_at[(j, 1)], r_at[(j, 2)]);
            Rot3::exp(&r).rotate(&(at[j].accel - bias.accel_bias))
        })
        .collect();
    let trend_a = Trend::fit(&elapsed, &alpha);
    let kernel_a = SeKernel {
        lengthscale: cfg.lengthscale_a.unwrap_or(default_l),
        variance: cfg.variance_a.unwrap_or_else(|| mean_square(&alpha).max(cfg.sigma_a * cfg.sigma_a)),
    };
    let gram_a = gram(&kernel_a, &stamps, cfg.sigma_a)?;
    let weights_a = weights(&gram_a, &elapsed, &alpha, &trend_a);

    Ok(LatentGpModel {
        anchor_stamp: a,
        end_stamp: b,
        latent_stamps: stamps,
        rho,
        alpha,
        kernel_r,
        kernel_a,
        sigma_r: cfg.sigma_r,
        sigma_a: cfg.sigma_a,
        bias,
        iterations,
        trend_r,
        trend_a,
        gram_r,
        gram_a,
        weights_r,
        weights_a,
    })
}

impl LatentGpModel {
    fn check(&self, tau: f64) -> Result<(), GpError> {
        if !(tau >= self.anchor_stamp && tau <= self.end_stamp) {
            return Err(GpError::Extrapolation { tau, start: self.anchor_stamp, end: self.end_stamp });
        }
        Ok(())
    }

    fn apply(weights: &DMatrix<f64>, op: &DVector<f64>) -> Vector3<f64> {
        let v = weights.tr_mul(op);
        Vector3::new(v[0], v[1], v[2])
    }

    fn operators(&self, kernel: &SeKernel, tau: f64) -> (DVector<f64>, DVector<f64>) {
        let a = self.anchor_stamp;
        let single = DVector::from_iterator(self.latent_stamps.len(), self.latent_stamps.iter().map(|&t| kernel.single(a, tau, t)));
        let double = DVector::from_iterator(self.latent_stamps.len(), self.latent_stamps.iter().map(|&t| kernel.double(a, tau, t)));
        (single, double)
    }

    /// Posterior-mean increments only.
    pub fn query_mean(&self, tau: f64) -> Result<(Vector3<f64>, Vector3<f64>, Vector3<f64>), GpError> {
        self.check(tau)?;
        let a = self.anchor_stamp;
        let lr = DVector::from_iterator(self.latent_stamps.len(), self.latent_stamps.iter().map(|&t| self.kernel_r.single(a, tau, t)));
        let (lv, lp) = self.operators(&self.kernel_a, tau);
        let d = tau - a;
        Ok((
            self.trend_r.single(d) + Self::apply(&self.weights_r, &lr),
            self.trend_a.single(d) + Self::apply(&self.weights_a, &lv),
            self.trend_a.double(d) + Self::apply(&self.weights_a, &lp),
        ))
    }

    /// Increments and their posterior covariance at `tau`.
    pub fn query(&self, tau: f64) -> Result<GpPreintQuery, GpError> {
        self.check(tau)?;
        let a = self.anchor_stamp;
        let lr = DVector::from_iterator(self.latent_stamps.len(), self.latent_stamps.iter().map(|&t| self.kernel_r.single(a, tau, t)));
        let (lv, lp) = self.operators(&self.kernel_a, tau);

        let mut cov = Matrix9::zeros();
        if tau > a {
            let rr = self.kernel_r.single_single(a, tau) - lr.dot(&self.gram_r.solve(&lr));
            let (sd, dd) = self.kernel_a.single_double_and_double_double(a, tau);
            let kv = self.gram_a.solve(&lv);
            let kp = self.gram_a.solve(&lp);
            let vv = self.kernel_a.single_single(a, tau) - lv.dot(&kv);
            let vp = sd - lv.dot(&kp);
            let pp = dd - lp.dot(&kp);
            let block = floor_2x2(vv, vp, pp);
            let rr = rr.max(1e-300);
            for i in 0..3 {
                cov[(i, i)] = rr;
                cov[(3 + i, 3 + i)] = block.0;
                cov[(3 + i, 6 + i)] = block.1;
                cov[(6 + i, 3 + i)] = block.1;
                cov[(6 + i, 6 + i)] = block.2;
            }
        }
        let d = tau - a;
        Ok(GpPreintQuery {
            delta_r: self.trend_r.single(d) + Self::apply(&self.weights_r, &lr),
            delta_v: self.trend_a.single(d) + Self::apply(&self.weights_a, &lv),
            delta_p: self.trend_a.double(d) + Self::apply(&self.weights_a, &lp),
            query_covariance: cov,
        })
    }

    pub fn query_rotation(&self, tau: f64) -> Result<Rot3, GpError> {
        let (dr, _, _) = self.query_mean(tau)?;
        Ok(Rot3::exp(&dr))
    }

    /// Increments over the whole span packaged for the classical residual.
    pub fn to_preintegrated(&self, noise: ImuNoiseConfig) -> Result<PreintegratedImu, GpError> {
        let q = self.query(self.end_stamp)?;
        // Rotation noise enters the residual through log(dR^T ...).
        let jr = so3_right_jacobian(&q.delta_r);
        let mut cov = q.query_covariance;
        let rr = jr * cov.fixed_view::<3, 3>(0, 0) * jr.transpose();
        cov.fixed_view_mut::<3, 3>(0, 0).copy_from(&((rr + rr.transpose()) * 0.5));
        Ok(PreintegratedImu {
            start_stamp: self.anchor_stamp,
            delta_r: Rot3::exp(&q.delta_r),
            delta_v: q.delta_v,
            delta_p: q.delta_p,
            dt_total: self.end_stamp - self.anchor_stamp,
            covariance: cov,
            bias_lin: self.bias,
            noise,
        })
    }
}

// Symmetric 2x2 [[a, b], [b, c]] with eigenvalues floored to stay positive.
fn floor_2x2(a: f64, b: f64, c: f64) -> (f64, f64, f64) {
    let m = nalgebra::Matrix2::new(a, b, b, c);
    let eig = m.symmetric_eigen();
    let floor = 1e-14 * (a.abs() + c.abs()).max(1e-300);
    let vals = eig.eigenvalues.map(|e| e.max(floor));
    let out = eig.eigenvectors * nalgebra::Matrix2::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (out[(0, 0)], 0.5 * (out[(0, 1)] + out[(1, 0)]), out[(1, 1)])
}

/// World pose at `tau` from the anchor state and the latent model, with the
/// Jacobian of the right-perturbed result with respect to the anchor's
/// 15-dimensional error state.
pub fn interpolate_pose(
    anchor: &ImuState,
    model: &LatentGpModel,
    tau: f64,
    gravity: &Vector3<f64>,
) -> Result<(Pose3, Matrix6x15), GpError> {
    Ok(model.pose_increment(tau)?.apply(anchor, gravity))
}

/// Mean rotation and position increments from the anchor to one query time.
/// They do not depend on the anchor state, so they can be computed once per
/// observation and reused across solver iterations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseIncrement {
    pub delta_r: Rot3,
    pub delta_p: Vector3<f64>,
    pub delta_t: f64,
}

impl PoseIncrement {
    pub fn apply(&self, anchor: &ImuState, gravity: &Vector3<f64>) -> (Pose3, Matrix6x15) {
        pose_from_increments(anchor, &self.delta_r, &self.delta_p, self.delta_t, gravity)
    }
}

impl LatentGpModel {
    pub fn pose_increment(&self, tau: f64) -> Result<PoseIncrement, GpError> {
        let (dr, _, dp) = self.query_mean(tau)?;
        Ok(PoseIncrement { delta_r: Rot3::exp(&dr), delta_p: dp, delta_t: tau - self.anchor_stamp })
    }
}

pub(crate) fn pose_from_increments(
    anchor: &ImuState,
    delta_r: &Rot3,
    delta_p: &Vector3<f64>,
    delta_t: f64,
    gravity: &Vector3<f64>,
) -> (Pose3, Matrix6x15) {
    let rk = anchor.pose.rotation;
    let rot = rk * *delta_r;
    let pos = anchor.pose.translation
        + anchor.velocity * delta_t
        + gravity * (0.5 * delta_t * delta_t)
        + rk.rotate(delta_p);
    let drt: Matrix3<f64> = delta_r.matrix().transpose();
    let mut jac = Matrix6x15::zeros();
    jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&drt);
    jac.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-drt * hat(delta_p)));
    jac.fixed_view_mut::<3, 3>(0, 6).copy_from(&(rot.matrix().transpose() * delta_t));
    jac.fixed_view_mut::<3, 3>(3, 3).copy_from(&drt);
    (Pose3::new(rot, pos), jac)
}
