mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::*;
use gpvio::graph::{Backend, EvalCache, Factor, KnotState};
use gpvio::imu_preint::{integrate, predict, ImuBias, ImuNoiseConfig, ImuState};
use gpvio::par::Execution;
use gpvio::sim::*;
use gpvio::visual::{project, Landmark};
use nalgebra::{DVector, Vector3, Vector6};

const G: Vector3<f64> = Vector3::new(0.0, 0.0, -9.81);

fn kinds() -> [TrajectorySpec; 4] {
    [TrajectoryKind::ConstantTwist, TrajectoryKind::Sinusoidal6dof, TrajectoryKind::FigureEight, TrajectoryKind::PiecewiseSmooth]
        .map(|kind| TrajectorySpec { kind, twist: Vector6::new(0.5, 0.1, -0.2, 0.3, -0.1, 0.4), ..Default::default() })
}

#[test]
fn velocity_and_specific_force_match_differences() {
    let mut r = rng(1);
    let h = 1e-5;
    for spec in kinds() {
        let mut worst: (f64, f64) = (0.0, 0.0);
        for _ in 0..200 {
            let t = rand::Rng::random_range(&mut r, 0.01..spec.duration - 0.01);
            let gt = spec.ground_truth(t, &G).unwrap();
            let (a, b) = (spec.ground_truth(t - h, &G).unwrap(), spec.ground_truth(t + h, &G).unwrap());
            // Symmetric difference: the second-order terms cancel.
            let fd = (a.pose.inverse() * b.pose).log() / (2.0 * h);
            worst.0 = worst.0.max((fd - gt.velocity.0).norm());
            let accel = (b.world_velocity() - a.world_velocity()) / (2.0 * h);
            let f = gt.pose.rotation.inverse().rotate(&(accel - G));
            worst.1 = worst.1.max((f - gt.specific_force).norm());
        }
        assert!(worst.0 < 1e-6 && worst.1 < 1e-6, "{:?}: {worst:?}", spec.kind);
    }
}

#[test]
fn stationary_imu_reads_gravity_reaction_plus_bias() {
    let spec = TrajectorySpec { position_amplitude: Vector3::zeros(), rotation_amplitude: Vector3::zeros(), ..Default::default() };
    let bias = ImuBias::new(Vector3::new(0.1, -0.2, 0.05), Vector3::new(0.01, 0.02, -0.03));
    let rig = SensorRig { noise: SimNoise::zero(), bias, ..Default::default() };
    let imu = synthesize_imu(&spec, &rig, 5).unwrap();
    assert_eq!(imu.len(), 2001);
    for s in imu {
        assert!((s.gyro - bias.gyro_bias).norm() < 1e-15);
        assert!((s.accel - Vector3::new(0.1, -0.2, 9.86)).norm() < 1e-12);
    }
}

#[test]
fn constant_twist_integrates_to_ground_truth() {
    let spec = kinds()[0];
    let rig = SensorRig { noise: SimNoise::zero(), ..Default::default() };
    let imu = synthesize_imu(&spec, &rig, 2).unwrap();
    for (t0, t1) in [(0.0, 0.05), (1.0, 2.0), (3.0, 6.0)] {
        let span: Vec<_> = imu.iter().copied().filter(|s| s.stamp >= t0 - 1e-9 && s.stamp <= t1 + 1e-9).collect();
        let pre = integrate(&span, ImuBias::zero(), ImuNoiseConfig::default()).unwrap();
        let (a, b) = (spec.ground_truth(t0, &G).unwrap(), spec.ground_truth(t1, &G).unwrap());
        let x0 = ImuState::new(t0, a.pose, a.world_velocity(), ImuBias::zero());
        let x1 = predict(&x0, &pre, &ImuNoiseConfig::default());
        let dt = t1 - t0;
        let (ep, er) = ((x1.pose.translation - b.pose.translation).norm(), x1.pose.rotation.angle_to(&b.pose.rotation));
        // Second-order scheme: error per unit time scales with dt_imu^2.
        assert!(ep < 1e-6 * dt.max(1.0).powi(2) && er < 1e-7 * dt, "{t0}..{t1}: {ep:e} m {er:e} rad");
        assert!((x1.velocity - b.world_velocity()).norm() < 1e-6 * dt.max(1.0));
    }
}

#[test]
fn same_seed_is_bit_identical() {
    let spec = TrajectorySpec { duration: 3.0, ..Default::default() };
    let rig = SensorRig::default();
    let field = LandmarkField::default();
    let l1 = field.generate(9).unwrap();
    assert_eq!(l1, field.generate(9).unwrap());
    assert_eq!(synthesize_imu(&spec, &rig, 9).unwrap(), synthesize_imu(&spec, &rig, 9).unwrap());
    let t1 = synthesize_tracks(&spec, &rig, &l1, 9, Execution::Parallel).unwrap();
    let t2 = synthesize_tracks(&spec, &rig, &l1, 9, Execution::Sequential).unwrap();
    assert_eq!(t1, t2);
    assert_ne!(synthesize_imu(&spec, &rig, 10).unwrap(), synthesize_imu(&spec, &rig, 9).unwrap());
}

#[test]
fn stamps_are_unique_and_tracks_ordered() {
    let spec = TrajectorySpec::default();
    let rig = SensorRig::default();
    let landmarks = LandmarkField::default().generate(4).unwrap();
    let obs = synthesize_tracks(&spec, &rig, &landmarks, 4, Execution::default()).unwrap();
    assert!(obs.len() > 1000);
    let stamps: BTreeSet<u64> = obs.iter().map(|o| o.stamp.to_bits()).collect();
    assert_eq!(stamps.len(), obs.len());
    assert!(obs.windows(2).all(|w| w[0].stamp < w[1].stamp));
    let mut last: BTreeMap<u64, f64> = BTreeMap::new();
    for o in &obs {
        if let Some(prev) = last.insert(o.track_id, o.stamp) {
            assert!(o.stamp > prev);
        }
        assert!(o.stamp >= 0.0 && o.stamp <= spec.duration);
    }
}

#[test]
fn zero_noise_observations_reproject_exactly() {
    let spec = TrajectorySpec::default();
    let rig = SensorRig { noise: SimNoise::zero(), ..Default::default() };
    let landmarks = LandmarkField::default().generate(6).unwrap();
    let obs = synthesize_tracks(&spec, &rig, &landmarks, 6, Execution::default()).unwrap();
    for o in &obs {
        let l = landmarks[landmark_of_track(o.track_id) as usize];
        let (px, _) = project(&spec.ground_truth(o.stamp, &G).unwrap().pose, &rig.camera, &l).unwrap();
        assert!((px - o.pixel).norm() < 1e-9);
        assert!(rig.camera.in_image(&o.pixel));
    }
}

#[test]
fn rejects_invalid_inputs() {
    let spec = TrajectorySpec::default();
    assert!(matches!(spec.ground_truth(-0.1, &G), Err(SimError::OutOfRange { .. })));
    assert!(matches!(spec.ground_truth(10.5, &G), Err(SimError::OutOfRange { .. })));
    assert!(TrajectorySpec { duration: 0.0, ..spec }.validate().is_err());
    assert!(SensorRig { imu_rate: 0.0, ..Default::default() }.validate().is_err());
    assert!(SensorRig { feature_jitter: 1.0, ..Default::default() }.validate().is_err());
    let empty = LandmarkField { min: Vector3::zeros(), max: Vector3::zeros(), count: 3 };
    assert!(empty.generate(0).is_err());
    let behind = Landmark { id: 0, position: Vector3::new(-30.0, 0.0, 0.0) };
    assert!(synthesize_tracks(&spec, &SensorRig::default(), &[behind], 1, Execution::Sequential).unwrap().is_empty());
}

/// Largest unwhitened residual of each factor kind with every knot at the
/// true state: pixels for projections, stacked increment error for IMU.
fn residuals_at_truth(kind: TrajectoryKind, backend: Backend, imu_rate: f64) -> (f64, f64) {
    let mut cfg = scenario(true, 1.0);
    cfg.trajectory.kind = kind;
    cfg.sim.imu_rate = imu_rate;
    let mut sw = small_window(cfg, backend, 12, 40);
    let rig = sw.cfg.rig().unwrap();
    let mut s = sw.window.states();
    for k in s.knots.iter_mut() {
        let gt = sw.cfg.trajectory.ground_truth(k.stamp(), &rig.gravity).unwrap();
        let x = ImuState::new(k.stamp(), gt.pose, gt.world_velocity(), rig.bias);
        *k = KnotState::from_imu_state(backend, &x, gt.velocity.angular());
    }
    sw.window.set_states(s.clone()).unwrap();
    let env = sw.window.env().clone();
    let cache = EvalCache::build(&s, false, Execution::Sequential);
    let (mut pixel, mut imu) = (0.0f64, 0.0f64);
    for f in sw.window.factors().unwrap() {
        let lin = f.evaluate(&s, &env, &cache, false).unwrap();
        match &f {
            Factor::Imu { whitener, .. } => {
                let raw: DVector<f64> = whitener.clone().lu().solve(&lin.residual).unwrap();
                imu = imu.max(raw.amax());
            }
            Factor::ProjectionCt { .. } | Factor::ProjectionGp { .. } => pixel = pixel.max(lin.residual.norm() * env.pixel_sigma),
            _ => {}
        }
    }
    (pixel, imu)
}

#[test]
fn zero_noise_measurements_explained_at_truth() {
    for backend in [Backend::CtImu, Backend::GpImu] {
        let (pixel, imu) = residuals_at_truth(TrajectoryKind::ConstantTwist, backend, 200.0);
        println!("{backend} constant twist: pixel {pixel:.2e}, imu {imu:.2e}");
        assert!(pixel < 1e-6 && imu < 1e-6, "{backend}: {pixel:e} {imu:e}");
        // Midpoint integration error on the sinusoid is 1.4e-6 at 200 Hz and
        // falls with the square of the sample spacing.
        let (pixel, imu) = residuals_at_truth(TrajectoryKind::Sinusoidal6dof, backend, 1000.0);
        println!("{backend} sinusoidal: pixel {pixel:.2e}, imu {imu:.2e}");
        assert!(imu < 1e-6, "{backend}: {imu:e}");
    }
}
