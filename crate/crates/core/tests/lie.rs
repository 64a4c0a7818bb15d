mod common;

use common::*;
use gpvio::lie::*;
use nalgebra::{Matrix3, Vector3, Vector6};
use proptest::prelude::*;

#[test]
fn random_suite_within_tolerance() {
    let s = lie_suite(7, 1000);
    assert!(s.so3_round_trip < 1e-10, "{s:?}");
    assert!(s.so3_exp_log < 1e-9, "{s:?}");
    assert!(s.se3_round_trip < 1e-10, "{s:?}");
    assert!(s.jacobian < 1e-5, "{s:?}");
}

#[test]
fn small_angle_jacobians_match_differences() {
    // Exercises the series branches.
    let mut r = rng(3);
    for scale in [1e-9, 1e-7, 1e-5, 1e-3, 5e-2] {
        for _ in 0..20 {
            let phi = rotvec(&mut r, scale);
            let jr = so3_right_jacobian(&phi);
            let expect = Matrix3::identity() - hat(&phi) * 0.5;
            assert!((jr - expect).norm() <= phi.norm_squared() + 1e-15);
            assert!((jr * so3_right_jacobian_inv(&phi) - Matrix3::identity()).norm() < 1e-12);
            let xi = Vector6::from_iterator(vec3(&mut r, 1.0).iter().chain(phi.iter()).copied());
            assert!((se3_right_jacobian(&xi) * se3_right_jacobian_inv(&xi) - nalgebra::Matrix6::identity()).norm() < 1e-12);
        }
    }
}

#[test]
fn pi_rotation_about_x() {
    let r = Rot3::from_matrix(&Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0));
    let w = so3_log(&r);
    assert!((w - Vector3::new(std::f64::consts::PI, 0.0, 0.0)).norm() < 1e-12);
    assert!((so3_exp(&w).matrix() - r.matrix()).norm() < 1e-12);
}

#[test]
fn composition_is_associative() {
    let mut r = rng(11);
    for _ in 0..100 {
        let (a, b, c) = (pose(&mut r), pose(&mut r), pose(&mut r));
        let lhs = (a * b) * c;
        let rhs = a * (b * c);
        assert!((lhs.matrix() - rhs.matrix()).norm() < 1e-9);
        assert!(lhs.is_valid(1e-9));
    }
}

proptest! {
    #[test]
    fn so3_round_trip(x in -1.0..1.0f64, y in -1.0..1.0f64, z in -1.0..1.0f64, s in 0.0..3.14f64) {
        let v = Vector3::new(x, y, z);
        prop_assume!(v.norm() > 1e-6);
        let phi = v / v.norm() * s;
        prop_assert!((so3_log(&so3_exp(&phi)) - phi).norm() < 1e-10);
    }

    #[test]
    fn product_stays_a_rotation(a in proptest::array::uniform3(-3.0..3.0f64), b in proptest::array::uniform3(-3.0..3.0f64)) {
        let r = so3_exp(&Vector3::from(a)) * so3_exp(&Vector3::from(b));
        prop_assert!(r.is_valid(1e-9));
    }

    #[test]
    fn se3_round_trip(v in proptest::array::uniform3(-5.0..5.0f64), w in proptest::array::uniform3(-1.8..1.8f64)) {
        let xi = Vector6::new(v[0], v[1], v[2], w[0], w[1], w[2]);
        prop_assert!((se3_log(&se3_exp(&xi)) - xi).norm() < 1e-10);
    }
}
