//! SO(3) and SE(3) in matrix form.
//!
//! Tangent vectors of SE(3) are ordered `[rho, phi]`: translational part
//! first, rotational part second, the same order as a body twist `[v, w]`.
//! All Jacobians follow the right-perturbation convention
//! `exp(x + d) ~= exp(x) * exp(J_r(x) d)`.
//!
//! The Jacobian helpers are generic over [`RealField`] so the same code can
//! be evaluated on dual numbers when a factor needs the derivative of a
//! Jacobian-vector product.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Matrix6, RealField, Rotation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

/// Below this rotation angle (rad) the closed forms switch to Taylor series.
pub const SMALL_ANGLE: f64 = 1e-6;

// The SE(3) coupling block divides by theta^5; its series is used over a
// wider range so the coefficients stay clean under dual-number evaluation.
const Q_SERIES_ANGLE: f64 = 0.1;
// SO(3) Jacobian coefficients lose about half their digits to cancellation
// near zero; series take over below this angle.
const SO3_SERIES_ANGLE: f64 = 1e-2;

fn lit<T: RealField>(x: f64) -> T {
    nalgebra::convert(x)
}

/// Skew-symmetric matrix such that `hat(a) * b == a x b`.
pub fn hat<T: RealField + Copy>(v: &Vector3<T>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(z, -v[2], v[1], v[2], z, -v[0], -v[1], v[0], z)
}

/// Inverse of [`hat`] applied to the skew part of `m`.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// A rotation matrix.
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rot3(Matrix3<f64>);

impl fmt::Debug for Rot3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Rot3({:?})", self.log())
    }
}

impl Default for Rot3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rot3 {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Wraps a matrix the caller guarantees is orthonormal with det +1.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    /// Projects an arbitrary matrix onto the closest rotation.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let r = Rotation3::from_matrix_eps(m, 1e-15, 100, Rotation3::identity());
        Self(r.into_inner())
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>) -> Self {
        Self(q.to_rotation_matrix().into_inner())
    }

    pub fn to_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.0))
    }

    pub fn exp(phi: &Vector3<f64>) -> Self {
        so3_exp(phi)
    }

    pub fn log(&self) -> Vector3<f64> {
        so3_log(self)
    }

    pub fn rx(angle: f64) -> Self {
        Self::exp(&Vector3::new(angle, 0.0, 0.0))
    }

    pub fn ry(angle: f64) -> Self {
        Self::exp(&Vector3::new(0.0, angle, 0.0))
    }

    pub fn rz(angle: f64) -> Self {
        Self::exp(&Vector3::new(0.0, 0.0, angle))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Geodesic angle between two rotations (rad).
    pub fn angle_to(&self, other: &Rot3) -> f64 {
        (self.inverse() * *other).log().norm()
    }

    /// Checks orthonormality and orientation within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let ortho = (self.0.transpose() * self.0 - Matrix3::identity()).amax();
        ortho <= tol && (self.0.determinant() - 1.0).abs() <= tol
    }
}

impl Mul for Rot3 {
    type Output = Rot3;
    fn mul(self, rhs: Rot3) -> Rot3 {
        Rot3(self.0 * rhs.0)
    }
}

impl Mul<Vector3<f64>> for Rot3 {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// Rodrigues' formula.
pub fn so3_exp(phi: &Vector3<f64>) -> Rot3 {
    let theta2 = phi.norm_squared();
    let k = hat(phi);
    if theta2.sqrt() < SMALL_ANGLE {
        return Rot3(Matrix3::identity() + k + 0.5 * k * k);
    }
    let theta = theta2.sqrt();
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / theta2;
    Rot3(Matrix3::identity() + a * k + b * k * k)
}

/// Principal logarithm, `|result| <= pi`.
///
/// At exactly pi the axis sign is ambiguous; the axis is chosen so that its
/// first non-zero component is positive.
pub fn so3_log(r: &Rot3) -> Vector3<f64> {
    let m = &r.0;
    let c = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    // w = sin(theta) * axis
    let w = vee(m);
    let s = w.norm();
    let theta = s.atan2(c);
    if theta < SMALL_ANGLE {
        return w * (1.0 + theta * theta / 6.0);
    }
    if c > -0.99 {
        return w * (theta / s);
    }
    // Near pi: (R + R^T)/2 - cos(theta) I = (1 - cos(theta)) a a^T.
    let sym = (m + m.transpose()) * 0.5 - Matrix3::identity() * c;
    let (mut col, mut best) = (0, sym[(0, 0)]);
    for i in 1..3 {
        if sym[(i, i)] > best {
            best = sym[(i, i)];
            col = i;
        }
    }
    let mut axis = sym.column(col).into_owned();
    axis /= axis.norm();
    if s > 1e-12 {
        if axis.dot(&w) < 0.0 {
            axis = -axis;
        }
    } else if let Some(first) = axis.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            axis = -axis;
        }
    }
    axis * theta
}

// Coefficients (1 - cos t)/t^2 and (t - sin t)/t^3, from t^2.
fn so3_coeffs<T: RealField + Copy>(theta2: T) -> (T, T) {
    if theta2 < lit::<T>(SO3_SERIES_ANGLE * SO3_SERIES_ANGLE) {
        let t4 = theta2 * theta2;
        (
            lit::<T>(0.5) - theta2 / lit::<T>(24.0) + t4 / lit::<T>(720.0),
            lit::<T>(1.0 / 6.0) - theta2 / lit::<T>(120.0) + t4 / lit::<T>(5040.0),
        )
    } else {
        let t = theta2.sqrt();
        ((T::one() - t.cos()) / theta2, (t - t.sin()) / (theta2 * t))
    }
}

/// Right Jacobian of SO(3).
pub fn so3_right_jacobian<T: RealField + Copy>(phi: &Vector3<T>) -> Matrix3<T> {
    let (a, b) = so3_coeffs(phi.dot(phi));
    let k = hat(phi);
    Matrix3::identity() - k * a + k * k * b
}

/// Inverse of the right Jacobian of SO(3).
pub fn so3_right_jacobian_inv<T: RealField + Copy>(phi: &Vector3<T>) -> Matrix3<T> {
    let theta2 = phi.dot(phi);
    let k = hat(phi);
    let c = if theta2 < lit::<T>(SO3_SERIES_ANGLE * SO3_SERIES_ANGLE) {
        lit::<T>(1.0 / 12.0) + theta2 / lit::<T>(720.0) + theta2 * theta2 / lit::<T>(30240.0)
    } else {
        let t = theta2.sqrt();
        T::one() / theta2 - (T::one() + t.cos()) / (lit::<T>(2.0) * t * t.sin())
    };
    Matrix3::identity() + k * lit::<T>(0.5) + k * k * c
}

pub fn so3_left_jacobian<T: RealField + Copy>(phi: &Vector3<T>) -> Matrix3<T> {
    so3_right_jacobian(&-phi)
}

pub fn so3_left_jacobian_inv<T: RealField + Copy>(phi: &Vector3<T>) -> Matrix3<T> {
    so3_right_jacobian_inv(&-phi)
}

/// Coupling block of the SE(3) left Jacobian.
pub fn se3_left_q<T: RealField + Copy>(rho: &Vector3<T>, phi: &Vector3<T>) -> Matrix3<T> {
    let theta2 = phi.dot(phi);
    let (c1, c2, c3) = if theta2 < lit::<T>(Q_SERIES_ANGLE * Q_SERIES_ANGLE) {
        let t4 = theta2 * theta2;
        let t6 = t4 * theta2;
        (
            lit::<T>(1.0 / 6.0) - theta2 / lit::<T>(120.0) + t4 / lit::<T>(5040.0) - t6 / lit::<T>(362880.0),
            lit::<T>(1.0 / 24.0) - theta2 / lit::<T>(720.0) + t4 / lit::<T>(40320.0) - t6 / lit::<T>(3628800.0),
            lit::<T>(1.0 / 120.0) - theta2 / lit::<T>(2520.0) + t4 / lit::<T>(120960.0) - t6 / lit::<T>(9979200.0),
        )
    } else {
        let t = theta2.sqrt();
        let (s, c) = (t.sin(), t.cos());
        let t3 = theta2 * t;
        let t4 = theta2 * theta2;
        (
            (t - s) / t3,
            (theta2 + lit::<T>(2.0) * c - lit::<T>(2.0)) / (lit::<T>(2.0) * t4),
            (lit::<T>(2.0) * t - lit::<T>(3.0) * s + t * c) / (lit::<T>(2.0) * t4 * t),
        )
    };
    let p = hat(phi);
    let r = hat(rho);
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    r * lit::<T>(0.5)
        + (pr + rp + prp) * c1
        + (p * pr + rp * p - prp * lit::<T>(3.0)) * c2
        + (prp * p + p * prp) * c3
}

fn split<T: RealField + Copy>(xi: &Vector6<T>) -> (Vector3<T>, Vector3<T>) {
    (xi.fixed_rows::<3>(0).into_owned(), xi.fixed_rows::<3>(3).into_owned())
}

fn upper_block<T: RealField + Copy>(a: &Matrix3<T>, q: &Matrix3<T>) -> Matrix6<T> {
    let mut j = Matrix6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(a);
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(q);
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(a);
    j
}

pub fn se3_left_jacobian<T: RealField + Copy>(xi: &Vector6<T>) -> Matrix6<T> {
    let (rho, phi) = split(xi);
    upper_block(&so3_left_jacobian(&phi), &se3_left_q(&rho, &phi))
}

pub fn se3_left_jacobian_inv<T: RealField + Copy>(xi: &Vector6<T>) -> Matrix6<T> {
    let (rho, phi) = split(xi);
    let jinv = so3_left_jacobian_inv(&phi);
    let q = se3_left_q(&rho, &phi);
    upper_block(&jinv, &(-(jinv * q * jinv)))
}

/// Right Jacobian of SE(3), `J_r(xi) = J_l(-xi)`.
pub fn se3_right_jacobian<T: RealField + Copy>(xi: &Vector6<T>) -> Matrix6<T> {
    se3_left_jacobian(&-xi)
}

pub fn se3_right_jacobian_inv<T: RealField + Copy>(xi: &Vector6<T>) -> Matrix6<T> {
    se3_left_jacobian_inv(&-xi)
}

/// Rigid transform `x_parent = R x_child + t`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose3 {
    pub rotation: Rot3,
    pub translation: Vector3<f64>,
}

impl Pose3 {
    pub fn new(rotation: Rot3, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Rot3::identity(), t)
    }

    pub fn exp(xi: &Vector6<f64>) -> Self {
        se3_exp(xi)
    }

    pub fn log(&self) -> Vector6<f64> {
        se3_log(self)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.inverse();
        Self::new(rt, -(rt * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * *p + self.translation
    }

    /// `self^-1 * p` without forming the inverse.
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix().transpose() * (p - self.translation)
    }

    /// Right retraction `self * exp(delta)`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Self {
        *self * Pose3::exp(delta)
    }

    /// Inverse of [`Pose3::retract`]: `log(self^-1 * other)`.
    pub fn local(&self, other: &Pose3) -> Vector6<f64> {
        (self.inverse() * *other).log()
    }

    /// Adjoint for `[rho, phi]` ordering: `[[R, t^ R], [0, R]]`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation.matrix();
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
        ad.fixed_view_mut::<3, 3>(0, 3).copy_from(&(hat(&self.translation) * r));
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(r);
        ad
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.rotation.is_valid(tol) && self.translation.iter().all(|x| x.is_finite())
    }
}

impl Mul for Pose3 {
    type Output = Pose3;
    fn mul(self, rhs: Pose3) -> Pose3 {
        Pose3::new(self.rotation * rhs.rotation, self.rotation * rhs.translation + self.translation)
    }
}

/// `[rho, phi]` to a pose: `R = exp(phi)`, `t = J_l(phi) rho`.
pub fn se3_exp(xi: &Vector6<f64>) -> Pose3 {
    let (rho, phi) = split(xi);
    Pose3::new(so3_exp(&phi), so3_left_jacobian(&phi) * rho)
}

pub fn se3_log(t: &Pose3) -> Vector6<f64> {
    let phi = so3_log(&t.rotation);
    let rho = so3_left_jacobian_inv(&phi) * t.translation;
    let mut xi = Vector6::zeros();
    xi.fixed_rows_mut::<3>(0).copy_from(&rho);
    xi.fixed_rows_mut::<3>(3).copy_from(&phi);
    xi
}

/// Generalized body velocity `[v, w]` (m/s, rad/s).
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn new(linear: Vector3<f64>, angular: Vector3<f64>) -> Self {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&linear);
        v.fixed_rows_mut::<3>(3).copy_from(&angular);
        Self(v)
    }

    pub fn zero() -> Self {
        Self(Vector6::zeros())
    }

    pub fn linear(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn angular(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn as_vector(&self) -> &Vector6<f64> {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn close3(a: &Matrix3<f64>, b: &Matrix3<f64>, tol: f64) -> bool {
        (a - b).amax() < tol
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(so3_exp(&Vector3::zeros()), Rot3::identity());
        assert_eq!(se3_exp(&Vector6::zeros()), Pose3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = so3_exp(&Vector3::new(0.0, 0.0, PI / 2.0));
        let v = r * Vector3::x();
        assert!((v - Vector3::y()).norm() < 1e-12);
    }

    #[test]
    fn log_of_rz() {
        let phi = so3_log(&Rot3::rz(0.3));
        assert!((phi - Vector3::new(0.0, 0.0, 0.3)).norm() < 1e-14);
        assert_eq!(so3_log(&Rot3::identity()), Vector3::zeros());
    }

    #[test]
    fn log_at_pi_picks_positive_axis() {
        let r = Rot3::from_matrix_unchecked(Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0));
        let phi = so3_log(&r);
        assert!((phi - Vector3::new(PI, 0.0, 0.0)).norm() < 1e-12);
        assert!(close3(so3_exp(&phi).matrix(), r.matrix(), 1e-12));
        // same rotation approached from the negative axis
        let r2 = so3_exp(&Vector3::new(-PI, 0.0, 0.0));
        assert!((so3_log(&r2) - Vector3::new(PI, 0.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn log_near_pi_keeps_sign() {
        let axis = Vector3::new(1.0, -2.0, 0.5).normalize();
        let phi = axis * (PI - 1e-7);
        let back = so3_log(&so3_exp(&phi));
        assert!((back - phi).norm() < 1e-8, "{back:?}");
    }

    #[test]
    fn right_jacobian_identity_and_series() {
        assert_eq!(so3_right_jacobian(&Vector3::<f64>::zeros()), Matrix3::identity());
        let phi = Vector3::new(1e-4, -2e-4, 3e-4);
        let approx = Matrix3::identity() - 0.5 * hat(&phi);
        assert!(close3(&so3_right_jacobian(&phi), &approx, 1e-7));
        let prod = so3_right_jacobian(&phi) * so3_right_jacobian_inv(&phi);
        assert!(close3(&prod, &Matrix3::identity(), 1e-12));
    }

    #[test]
    fn pure_translation_twist() {
        let xi = Vector6::new(1.0, 2.0, 3.0, 0.0, 0.0, 0.0);
        let t = se3_exp(&xi);
        assert_eq!(t.rotation, Rot3::identity());
        assert!((t.translation - Vector3::new(1.0, 2.0, 3.0)).norm() < 1e-15);
    }

    #[test]
    fn se3_jacobian_blocks_invert() {
        let xi = Vector6::new(0.3, -0.2, 0.5, 0.4, -0.7, 0.2);
        let prod = se3_right_jacobian(&xi) * se3_right_jacobian_inv(&xi);
        assert!((prod - Matrix6::identity()).amax() < 1e-12);
        let small = xi * 1e-3;
        let prod = se3_left_jacobian(&small) * se3_left_jacobian_inv(&small);
        assert!((prod - Matrix6::identity()).amax() < 1e-14);
    }

    #[test]
    fn q_series_matches_closed_form_at_switch() {
        let rho = Vector3::new(0.4, -0.3, 0.9);
        let dir = Vector3::new(0.2, 0.5, -0.8).normalize();
        let below = se3_left_q(&rho, &(dir * (Q_SERIES_ANGLE * (1.0 - 1e-12))));
        let above = se3_left_q(&rho, &(dir * (Q_SERIES_ANGLE * (1.0 + 1e-12))));
        assert!((below - above).amax() < 1e-11);
    }

    #[test]
    fn adjoint_moves_perturbations() {
        let t = se3_exp(&Vector6::new(0.5, -0.1, 0.3, 0.2, 0.1, -0.4));
        let d = Vector6::new(1e-3, 2e-3, -1e-3, 3e-3, -2e-3, 1e-3);
        let lhs = se3_exp(&(t.adjoint() * d)) * t;
        let rhs = t * se3_exp(&d);
        assert!((lhs.matrix() - rhs.matrix()).amax() < 1e-12);
    }
}
