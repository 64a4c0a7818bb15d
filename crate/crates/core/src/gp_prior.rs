//! White-noise-on-acceleration GP prior on SE(3).
//!
//! Between two knots the trajectory is written in the local frame of the
//! earlier knot, `T(t) = T_k exp(xi(t))`, with the local state
//! `gamma(t) = [xi(t), xi_dot(t)]` following a linear time-invariant
//! double integrator driven by white noise of spectral density `Qc`.
//! The body twist maps into the local frame as `xi_dot = J_r(xi)^-1 w`.
//!
//! Knot tangent ordering is `[pose (rho, phi), twist (v, w)]`, 12 entries,
//! with the pose perturbed on the right.

use nalgebra::{Matrix2, Matrix6, SMatrix, SVector, Vector6};
use num_dual::DualSVec64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::{se3_left_jacobian_inv, se3_right_jacobian, se3_right_jacobian_inv, Pose3, Twist};

pub type Vector12 = SVector<f64, 12>;
pub type Matrix12 = SMatrix<f64, 12, 12>;
pub type Matrix6x12 = SMatrix<f64, 6, 12>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PriorError {
    #[error("knot stamps not increasing: {first} then {second}")]
    Ordering { first: f64, second: f64 },
    #[error("time step must be positive, got {0}")]
    Domain(f64),
    #[error("query {tau} outside knot interval [{start}, {end}]")]
    Extrapolation { tau: f64, start: f64, end: f64 },
    #[error("power spectral density must be symmetric positive definite")]
    InvalidQc,
}

/// Pose and body twist at a knot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryState {
    pub stamp: f64,
    pub pose: Pose3,
    pub velocity: Twist,
}

impl TrajectoryState {
    pub fn new(stamp: f64, pose: Pose3, velocity: Twist) -> Self {
        Self { stamp, pose, velocity }
    }

    /// Applies a 12-dimensional tangent increment.
    pub fn retract(&self, delta: &Vector12) -> Self {
        let dpose: Vector6<f64> = delta.fixed_rows::<6>(0).into_owned();
        let dvel: Vector6<f64> = delta.fixed_rows::<6>(6).into_owned();
        Self {
            stamp: self.stamp,
            pose: self.pose.retract(&dpose),
            velocity: Twist(self.velocity.0 + dvel),
        }
    }
}

/// Power spectral density of the white-noise acceleration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WnoaConfig {
    qc: Matrix6<f64>,
}

impl Default for WnoaConfig {
    fn default() -> Self {
        Self::isotropic(0.05)
    }
}

impl WnoaConfig {
    pub fn new(qc: Matrix6<f64>) -> Result<Self, PriorError> {
        if (qc - qc.transpose()).amax() > 1e-12 {
            return Err(PriorError::InvalidQc);
        }
        let eig = qc.symmetric_eigenvalues();
        if eig.iter().any(|&e| !(e > 0.0)) {
            return Err(PriorError::InvalidQc);
        }
        Ok(Self { qc })
    }

    pub fn isotropic(q: f64) -> Self {
        Self { qc: Matrix6::identity() * q }
    }

    pub fn qc(&self) -> &Matrix6<f64> {
        &self.qc
    }
}

/// Transition-noise covariance over `dt`:
/// `[[dt^3/3 Qc, dt^2/2 Qc], [dt^2/2 Qc, dt Qc]]`.
pub fn prior_covariance(cfg: &WnoaConfig, dt: f64) -> Result<Matrix12, PriorError> {
    if !(dt > 0.0) {
        return Err(PriorError::Domain(dt));
    }
    let q = scalar_q(dt);
    let mut out = Matrix12::zeros();
    for r in 0..2 {
        for c in 0..2 {
            out.fixed_view_mut::<6, 6>(6 * r, 6 * c).copy_from(&(cfg.qc * q[(r, c)]));
        }
    }
    Ok(out)
}

fn scalar_q(dt: f64) -> Matrix2<f64> {
    Matrix2::new(dt.powi(3) / 3.0, dt * dt / 2.0, dt * dt / 2.0, dt)
}

fn scalar_phi(dt: f64) -> Matrix2<f64> {
    Matrix2::new(1.0, dt, 0.0, 1.0)
}

/// Blending matrices `(Lambda, Psi)` for a query `s` seconds after the first
/// knot of an interval of length `dt`. `Qc` cancels, so both act as scalars
/// on each 6-vector block.
pub fn blend_coefficients(s: f64, dt: f64) -> (Matrix2<f64>, Matrix2<f64>) {
    let q_dt_inv = scalar_q(dt).try_inverse().expect("dt > 0");
    let psi = scalar_q(s) * scalar_phi(dt - s).transpose() * q_dt_inv;
    let lambda = scalar_phi(s) - psi * scalar_phi(dt);
    (lambda, psi)
}

fn check_order(xk: &TrajectoryState, xk1: &TrajectoryState) -> Result<f64, PriorError> {
    let dt = xk1.stamp - xk.stamp;
    if !(dt > 0.0) {
        return Err(PriorError::Ordering { first: xk.stamp, second: xk1.stamp });
    }
    Ok(dt)
}

// J_r(xi)^-1 w and its derivative with respect to xi.
fn jr_inv_times(xi: &Vector6<f64>, w: &Vector6<f64>) -> (Vector6<f64>, Matrix6<f64>) {
    num_dual::jacobian(
        |x: SVector<DualSVec64<6>, 6>| se3_right_jacobian_inv(&x) * w.map(DualSVec64::<6>::from_re),
        xi,
    )
}

// J_r(x) y and its derivative with respect to x.
fn jr_times(x: &Vector6<f64>, y: &Vector6<f64>) -> (Vector6<f64>, Matrix6<f64>) {
    num_dual::jacobian(
        |v: SVector<DualSVec64<6>, 6>| se3_right_jacobian(&v) * y.map(DualSVec64::<6>::from_re),
        x,
    )
}

/// Prior residual between adjacent knots:
/// `[dt w_k - log(T_k^-1 T_k1), w_k - J_r(log(T_k^-1 T_k1))^-1 w_k1]`.
pub fn prior_residual(xk: &TrajectoryState, xk1: &TrajectoryState) -> Result<Vector12, PriorError> {
    let dt = check_order(xk, xk1)?;
    let xi = xk.pose.local(&xk1.pose);
    let g = se3_right_jacobian_inv(&xi) * xk1.velocity.0;
    Ok(stack(&(xk.velocity.0 * dt - xi), &(xk.velocity.0 - g)))
}

/// Prior residual and its Jacobians with respect to both knots.
#[derive(Clone, Debug)]
pub struct PriorLinearization {
    pub residual: Vector12,
    pub jac_k: Matrix12,
    pub jac_k1: Matrix12,
}

pub fn prior_residual_linearized(
    xk: &TrajectoryState,
    xk1: &TrajectoryState,
) -> Result<PriorLinearization, PriorError> {
    let dt = check_order(xk, xk1)?;
    let xi = xk.pose.local(&xk1.pose);
    let (g, dg) = jr_inv_times(&xi, &xk1.velocity.0);
    let jl_inv = se3_left_jacobian_inv(&xi);
    let jr_inv = se3_right_jacobian_inv(&xi);
    let eye = Matrix6::identity();

    let mut jac_k = Matrix12::zeros();
    jac_k.fixed_view_mut::<6, 6>(0, 0).copy_from(&jl_inv);
    jac_k.fixed_view_mut::<6, 6>(0, 6).copy_from(&(eye * dt));
    jac_k.fixed_view_mut::<6, 6>(6, 0).copy_from(&(dg * jl_inv));
    jac_k.fixed_view_mut::<6, 6>(6, 6).copy_from(&eye);

    let mut jac_k1 = Matrix12::zeros();
    jac_k1.fixed_view_mut::<6, 6>(0, 0).copy_from(&(-jr_inv));
    jac_k1.fixed_view_mut::<6, 6>(6, 0).copy_from(&(-(dg * jr_inv)));
    jac_k1.fixed_view_mut::<6, 6>(6, 6).copy_from(&(-jr_inv));

    Ok(PriorLinearization {
        residual: stack(&(xk.velocity.0 * dt - xi), &(xk.velocity.0 - g)),
        jac_k,
        jac_k1,
    })
}

fn stack(a: &Vector6<f64>, b: &Vector6<f64>) -> Vector12 {
    let mut out = Vector12::zeros();
    out.fixed_rows_mut::<6>(0).copy_from(a);
    out.fixed_rows_mut::<6>(6).copy_from(b);
    out
}

/// Interpolated state with Jacobians with respect to both knots.
#[derive(Clone, Debug)]
pub struct Interpolation {
    pub pose: Pose3,
    pub velocity: Twist,
    pub pose_jac_k: Matrix6x12,
    pub pose_jac_k1: Matrix6x12,
    pub velocity_jac_k: Matrix6x12,
    pub velocity_jac_k1: Matrix6x12,
}

/// Posterior-mean interpolation between two knots at `tau`.
pub fn interpolate(xk: &TrajectoryState, xk1: &TrajectoryState, tau: f64) -> Result<Interpolation, PriorError> {
    InterpolationContext::new(xk, xk1)?.state(tau)
}

#[derive(Clone, Debug)]
struct ContextJacobians {
    jl_inv: Matrix6<f64>,
    jr_inv: Matrix6<f64>,
    dg_dxi: Matrix6<f64>,
}

/// Per-interval quantities shared by every query inside one knot interval.
///
/// Building the context once per interval keeps the per-observation cost of
/// projection factors independent of the dual-number evaluation.
#[derive(Clone, Debug)]
pub struct InterpolationContext {
    start: TrajectoryState,
    end: TrajectoryState,
    dt: f64,
    xi: Vector6<f64>,
    g: Vector6<f64>,
    jac: Option<ContextJacobians>,
}

impl InterpolationContext {
    pub fn new(xk: &TrajectoryState, xk1: &TrajectoryState) -> Result<Self, PriorError> {
        let dt = check_order(xk, xk1)?;
        let xi = xk.pose.local(&xk1.pose);
        let (g, dg_dxi) = jr_inv_times(&xi, &xk1.velocity.0);
        Ok(Self {
            start: *xk,
            end: *xk1,
            dt,
            xi,
            g,
            jac: Some(ContextJacobians {
                jl_inv: se3_left_jacobian_inv(&xi),
                jr_inv: se3_right_jacobian_inv(&xi),
                dg_dxi,
            }),
        })
    }

    /// Context for value queries only; Jacobian queries will panic.
    pub fn values_only(xk: &TrajectoryState, xk1: &TrajectoryState) -> Result<Self, PriorError> {
        let dt = check_order(xk, xk1)?;
        let xi = xk.pose.local(&xk1.pose);
        let g = se3_right_jacobian_inv(&xi) * xk1.velocity.0;
        Ok(Self { start: *xk, end: *xk1, dt, xi, g, jac: None })
    }

    pub fn start_stamp(&self) -> f64 {
        self.start.stamp
    }

    pub fn end_stamp(&self) -> f64 {
        self.end.stamp
    }

    fn offset(&self, tau: f64) -> Result<f64, PriorError> {
        if !(tau >= self.start.stamp && tau <= self.end.stamp) {
            return Err(PriorError::Extrapolation { tau, start: self.start.stamp, end: self.end.stamp });
        }
        Ok(tau - self.start.stamp)
    }

    // Local pose and local velocity at offset s.
    fn local(&self, s: f64) -> (Matrix2<f64>, Matrix2<f64>, Vector6<f64>, Vector6<f64>) {
        let (lambda, psi) = blend_coefficients(s, self.dt);
        let w = self.start.velocity.0;
        let xi_tau = w * lambda[(0, 1)] + self.xi * psi[(0, 0)] + self.g * psi[(0, 1)];
        let xi_dot = w * lambda[(1, 1)] + self.xi * psi[(1, 0)] + self.g * psi[(1, 1)];
        (lambda, psi, xi_tau, xi_dot)
    }

    pub fn pose(&self, tau: f64) -> Result<Pose3, PriorError> {
        let s = self.offset(tau)?;
        if s == 0.0 {
            return Ok(self.start.pose);
        }
        if tau == self.end.stamp {
            return Ok(self.end.pose);
        }
        let (_, _, xi_tau, _) = self.local(s);
        Ok(self.start.pose * Pose3::exp(&xi_tau))
    }

    fn jacobians(&self) -> &ContextJacobians {
        self.jac.as_ref().expect("interpolation context built without Jacobians")
    }

    // d(local pose), d(local velocity) with respect to [knot k; knot k+1].
    fn local_jacobians(&self, lambda: &Matrix2<f64>, psi: &Matrix2<f64>) -> [[Matrix6x12; 2]; 2] {
        let cj = self.jacobians();
        let eye = Matrix6::identity();
        let mut out = [[Matrix6x12::zeros(); 2]; 2];
        for (row, (l, p0, p1)) in [
            (lambda[(0, 1)], psi[(0, 0)], psi[(0, 1)]),
            (lambda[(1, 1)], psi[(1, 0)], psi[(1, 1)]),
        ]
        .into_iter()
        .enumerate()
        {
            let through_xi = eye * p0 + cj.dg_dxi * p1;
            out[row][0].fixed_view_mut::<6, 6>(0, 0).copy_from(&(-(through_xi * cj.jl_inv)));
            out[row][0].fixed_view_mut::<6, 6>(0, 6).copy_from(&(eye * l));
            out[row][1].fixed_view_mut::<6, 6>(0, 0).copy_from(&(through_xi * cj.jr_inv));
            out[row][1].fixed_view_mut::<6, 6>(0, 6).copy_from(&(cj.jr_inv * p1));
        }
        out
    }

    /// Interpolated pose and its Jacobians (right perturbation of the
    /// result) with respect to the two knots.
    pub fn pose_with_jacobians(&self, tau: f64) -> Result<(Pose3, Matrix6x12, Matrix6x12), PriorError> {
        let s = self.offset(tau)?;
        let (lambda, psi, xi_tau, _) = self.local(s);
        let local = self.local_jacobians(&lambda, &psi);
        let delta = Pose3::exp(&xi_tau);
        let jr_tau = se3_right_jacobian(&xi_tau);
        let mut jk = jr_tau * local[0][0];
        let ad = delta.inverse().adjoint();
        let mut pose_part = jk.fixed_view_mut::<6, 6>(0, 0);
        pose_part += ad;
        let jk1 = jr_tau * local[0][1];
        let pose = if s == 0.0 {
            self.start.pose
        } else if tau == self.end.stamp {
            self.end.pose
        } else {
            self.start.pose * delta
        };
        Ok((pose, jk, jk1))
    }

    /// Full interpolated state with all Jacobians.
    pub fn state(&self, tau: f64) -> Result<Interpolation, PriorError> {
        let s = self.offset(tau)?;
        let (pose, pose_jac_k, pose_jac_k1) = self.pose_with_jacobians(tau)?;
        let (lambda, psi, xi_tau, xi_dot) = self.local(s);
        let local = self.local_jacobians(&lambda, &psi);
        let (vel, dvel_dxi) = jr_times(&xi_tau, &xi_dot);
        let jr_tau = se3_right_jacobian(&xi_tau);
        let velocity = if s == 0.0 {
            self.start.velocity
        } else if tau == self.end.stamp {
            self.end.velocity
        } else {
            Twist(vel)
        };
        Ok(Interpolation {
            pose,
            velocity,
            pose_jac_k,
            pose_jac_k1,
            velocity_jac_k: dvel_dxi * local[0][0] + jr_tau * local[1][0],
            velocity_jac_k1: dvel_dxi * local[0][1] + jr_tau * local[1][1],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::Rot3;
    use nalgebra::Vector3;

    fn state(stamp: f64, pose: Pose3, w: [f64; 6]) -> TrajectoryState {
        TrajectoryState::new(stamp, pose, Twist(Vector6::from_row_slice(&w)))
    }

    #[test]
    fn identical_static_knots_have_zero_residual() {
        let a = state(0.0, Pose3::identity(), [0.0; 6]);
        let b = state(0.05, Pose3::identity(), [0.0; 6]);
        assert_eq!(prior_residual(&a, &b).unwrap(), Vector12::zeros());
    }

    #[test]
    fn pure_translation_constant_velocity() {
        let t0 = Pose3::new(Rot3::rz(0.4), Vector3::new(1.0, 2.0, 3.0));
        let w = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let t1 = t0 * Pose3::from_translation(Vector3::x());
        let r = prior_residual(&state(0.0, t0, w), &state(1.0, t1, w)).unwrap();
        assert!(r.amax() < 1e-14);
    }

    #[test]
    fn ordering_error() {
        let a = state(1.0, Pose3::identity(), [0.0; 6]);
        let b = state(1.0, Pose3::identity(), [0.0; 6]);
        assert!(matches!(prior_residual(&a, &b), Err(PriorError::Ordering { .. })));
    }

    #[test]
    fn covariance_blocks() {
        let q = prior_covariance(&WnoaConfig::isotropic(1.0), 1.0).unwrap();
        assert!((q[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((q[(0, 6)] - 0.5).abs() < 1e-15);
        assert!((q[(6, 6)] - 1.0).abs() < 1e-15);
        assert!(q.cholesky().is_some());
        let q2 = prior_covariance(&WnoaConfig::isotropic(1.0), 2.0).unwrap();
        assert!((q2[(0, 0)] - 8.0 * q[(0, 0)]).abs() < 1e-14);
        assert!(matches!(prior_covariance(&WnoaConfig::default(), 0.0), Err(PriorError::Domain(_))));
    }

    #[test]
    fn qc_validation() {
        let mut m = Matrix6::identity();
        m[(0, 1)] = 0.5;
        assert_eq!(WnoaConfig::new(m), Err(PriorError::InvalidQc));
        assert_eq!(WnoaConfig::new(-Matrix6::identity()), Err(PriorError::InvalidQc));
    }

    #[test]
    fn blend_at_ends() {
        let (l, p) = blend_coefficients(0.0, 0.05);
        assert!((l - Matrix2::identity()).amax() < 1e-15 && p.amax() < 1e-15);
        let (l, p) = blend_coefficients(0.05, 0.05);
        assert!(l.amax() < 1e-12 && (p - Matrix2::identity()).amax() < 1e-12);
    }

    #[test]
    fn extrapolation_refused() {
        let a = state(0.0, Pose3::identity(), [0.0; 6]);
        let b = state(0.05, Pose3::identity(), [0.0; 6]);
        assert!(matches!(interpolate(&a, &b, 0.06), Err(PriorError::Extrapolation { .. })));
        assert!(matches!(interpolate(&a, &b, -0.01), Err(PriorError::Extrapolation { .. })));
    }
}
