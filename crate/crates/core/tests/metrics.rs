mod common;

use common::*;
use gpvio::io::StampedPose;
use gpvio::lie::{Pose3, Rot3};
use gpvio::metrics::*;
use nalgebra::{Vector3, Vector6};
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn wiggle(t: f64) -> Pose3 {
    Pose3::new(
        Rot3::exp(&Vector3::new(0.2 * (0.7 * t).sin(), 0.1 * (1.3 * t).cos(), 0.4 * t)),
        Vector3::new(2.0 * (0.5 * t).sin(), (0.8 * t).cos(), 0.3 * (1.1 * t).sin()),
    )
}

fn track(n: usize, rate: f64, f: impl Fn(f64) -> Pose3) -> Vec<StampedPose> {
    (0..n).map(|i| i as f64 / rate).map(|t| StampedPose { stamp: t, pose: f(t) }).collect()
}

fn mapped(poses: &[StampedPose], g: &Pose3) -> Vec<StampedPose> {
    poses.iter().map(|s| StampedPose { stamp: s.stamp, pose: *g * s.pose }).collect()
}

fn unaligned(est: &[StampedPose], reference: &[StampedPose]) -> AlignedPair {
    AlignedPair {
        stamps: reference.iter().map(|s| s.stamp).collect(),
        estimate: est.iter().map(|s| s.pose).collect(),
        reference: reference.iter().map(|s| s.pose).collect(),
        alignment: Pose3::identity(),
    }
}

#[test]
fn recovers_inverse_of_known_transform() {
    let mut r = rng(1);
    let reference = track(300, 20.0, wiggle);
    for _ in 0..50 {
        let g = pose(&mut r);
        let est = mapped(&reference, &g);
        let got = align_first_seconds(&est, &reference, 5.0).unwrap();
        assert!((got * g).log().norm() < 1e-9, "{:e}", (got * g).log().norm());
    }
}

#[test]
fn alignment_under_millimetre_noise() {
    let mut r = rng(2);
    let noise = Normal::new(0.0, 1e-3).unwrap();
    let reference = track(500, 100.0, wiggle);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let est: Vec<_> = reference
            .iter()
            .map(|s| {
                let n = Vector3::from_fn(|_, _| noise.sample(&mut r));
                StampedPose { stamp: s.stamp, pose: Pose3::new(s.pose.rotation, s.pose.translation + n) }
            })
            .collect();
        let g = align_first_seconds(&est, &reference, 5.0).unwrap();
        worst = worst.max(g.translation.norm());
    }
    assert!(worst < 1e-3, "{worst:e}");
}

#[test]
fn alignment_is_least_squares_optimal() {
    let mut r = rng(3);
    let reference = track(200, 20.0, wiggle);
    let g_true = pose(&mut r);
    let est: Vec<_> = mapped(&reference, &g_true)
        .into_iter()
        .map(|s| StampedPose { stamp: s.stamp, pose: Pose3::new(s.pose.rotation, s.pose.translation + vec3(&mut r, 0.05)) })
        .collect();
    let horizon = 5.0;
    let g = align_first_seconds(&est, &reference, horizon).unwrap();
    let objective = |g: &Pose3| -> f64 {
        est.iter().zip(&reference).filter(|(e, _)| e.stamp <= horizon + 1e-9).map(|(e, f)| (g.transform_point(&e.pose.translation) - f.pose.translation).norm_squared()).sum()
    };
    let best = objective(&g);
    for _ in 0..20 {
        let d: Vector6<f64> = vec6(&mut r, 1.0).normalize() * 1e-3;
        assert!(objective(&(g * Pose3::exp(&d))) >= best);
        assert!(objective(&(Pose3::exp(&d) * g)) >= best);
    }
}

#[test]
fn relative_error_ignores_rigid_transforms() {
    let mut r = rng(4);
    let reference = track(400, 20.0, wiggle);
    let est: Vec<_> = reference
        .iter()
        .map(|s| StampedPose { stamp: s.stamp, pose: s.pose * Pose3::exp(&(vec6(&mut r, 0.01))) })
        .collect();
    let base = unaligned(&est, &reference);
    for delta in DEFAULT_DELTAS {
        let e0 = rms_rte(&base, delta).unwrap().unwrap();
        let y0 = rms_rte_yaw(&base, delta).unwrap().unwrap();
        assert!(e0 > 1e-3);
        let g = pose(&mut r);
        let both = unaligned(&mapped(&est, &g), &mapped(&reference, &g));
        let one = unaligned(&mapped(&est, &g), &reference);
        for al in [both, one] {
            assert!((rms_rte(&al, delta).unwrap().unwrap() - e0).abs() < 1e-9);
        }
        let yaw_only = Pose3::new(Rot3::rz(r.random_range(-3.0..3.0)), vec3(&mut r, 5.0));
        let one = unaligned(&mapped(&est, &yaw_only), &reference);
        assert!((rms_rte_yaw(&one, delta).unwrap().unwrap() - y0).abs() < 1e-9);
    }
}

#[test]
fn drift_models_give_closed_form_errors() {
    let reference = track(400, 20.0, |t| Pose3::new(Rot3::identity(), Vector3::new(t, 0.0, 0.0)));
    let (d, w) = (0.02, 0.5f64.to_radians());
    let est: Vec<_> = reference
        .iter()
        .map(|s| StampedPose { stamp: s.stamp, pose: Pose3::new(Rot3::rz(w * s.stamp), s.pose.translation + Vector3::y() * d * s.stamp) })
        .collect();
    let al = unaligned(&est, &reference);
    let yaw = rms_rte_yaw(&al, 1.0).unwrap().unwrap();
    assert!((yaw - 0.5).abs() < 1e-9, "{yaw}");

    let drift: Vec<_> = reference
        .iter()
        .map(|s| StampedPose { stamp: s.stamp, pose: Pose3::new(s.pose.rotation, s.pose.translation + Vector3::new(0.0, d, -d) * s.stamp) })
        .collect();
    for delta in [0.5, 1.0, 2.0] {
        let e = rms_rte(&unaligned(&drift, &reference), delta).unwrap().unwrap();
        assert!((e - d * 2f64.sqrt() * delta).abs() < 1e-9, "{e}");
    }
}

#[test]
fn association_and_errors() {
    let reference = track(100, 100.0, wiggle);
    let shifted: Vec<_> = reference.iter().map(|s| StampedPose { stamp: s.stamp + 0.004, ..*s }).collect();
    assert_eq!(associate(&shifted, &reference, ASSOCIATION_TOL).len(), 100);
    let far: Vec<_> = reference.iter().map(|s| StampedPose { stamp: s.stamp + 0.0051, ..*s }).collect();
    let pairs = associate(&far, &reference, ASSOCIATION_TOL);
    assert!(pairs.iter().all(|(e, f)| (e.stamp - f.stamp).abs() <= ASSOCIATION_TOL));
    assert_eq!(associate(&far[..1], &reference[..1], ASSOCIATION_TOL).len(), 0);

    let al = align(&reference, &reference, 5.0).unwrap();
    assert_eq!(rms_rte(&al, 0.0), Err(MetricsError::InvalidDelta(0.0)));
    assert_eq!(rms_rte(&al, 100.0), Ok(None));
    assert_eq!(align(&reference[..2], &reference, 5.0).unwrap_err(), MetricsError::InsufficientOverlap(2));
}

#[test]
fn report_lists_every_delta() {
    let reference = track(400, 20.0, wiggle);
    let g = Pose3::new(Rot3::rz(0.4), Vector3::new(1.0, 2.0, 3.0));
    let report = evaluate(&mapped(&reference, &g), &reference, 5.0, &DEFAULT_DELTAS).unwrap();
    assert_eq!(report.rte.len(), 4);
    assert_eq!(report.associated_pairs, 400);
    let head = report.headline().unwrap();
    assert!(head.translation_rms_m.unwrap() < 1e-9 && head.yaw_rms_deg.unwrap() < 1e-7);
    let q = report.alignment.quaternion;
    assert!(((q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]) - 1.0).abs() < 1e-12);
    let text = serde_json::to_string(&report).unwrap();
    assert_eq!(serde_json::from_str::<MetricsReport>(&text).unwrap(), report);
}
