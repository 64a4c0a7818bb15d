//! Oracles shared by the integration tests: central differences, a dense
//! RK4 integrator of the preintegration kinematics, and random sampling.
#![allow(dead_code)]

use gpvio::imu_preint::ImuSample;
use gpvio::lie::{hat, Pose3, Rot3};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn vec3(rng: &mut impl Rng, scale: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| rng.random_range(-scale..scale))
}

pub fn vec6(rng: &mut impl Rng, scale: f64) -> Vector6<f64> {
    Vector6::from_fn(|_, _| rng.random_range(-scale..scale))
}

/// Random rotation vector with norm below `max_angle`.
pub fn rotvec(rng: &mut impl Rng, max_angle: f64) -> Vector3<f64> {
    loop {
        let v = vec3(rng, 1.0);
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n * rng.random_range(0.0..max_angle);
        }
    }
}

pub fn pose(rng: &mut impl Rng) -> Pose3 {
    Pose3::new(Rot3::exp(&rotvec(rng, 3.0)), vec3(rng, 5.0))
}

/// Central-difference Jacobian of `f` at `x`, one column per input.
pub fn numeric_jacobian(x: &DVector<f64>, h: f64, f: impl Fn(&DVector<f64>) -> DVector<f64>) -> DMatrix<f64> {
    let m = f(x).len();
    let mut j = DMatrix::zeros(m, x.len());
    for i in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[i] += h;
        xm[i] -= h;
        j.set_column(i, &((f(&xp) - f(&xm)) / (2.0 * h)));
    }
    j
}

/// `|a - b| / max(|b|, 1)` in the Frobenius norm.
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

pub fn dm<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

/// Smooth body-rate and specific-force signal.
#[derive(Clone, Copy, Debug)]
pub struct Signal {
    pub gyro_amp: Vector3<f64>,
    pub gyro_freq: Vector3<f64>,
    pub gyro_offset: Vector3<f64>,
    pub accel_amp: Vector3<f64>,
    pub accel_freq: Vector3<f64>,
    pub accel_offset: Vector3<f64>,
}

impl Signal {
    pub fn standard() -> Self {
        Self {
            gyro_amp: Vector3::new(0.6, -0.4, 0.8),
            gyro_freq: Vector3::new(0.7, 1.1, 0.5),
            gyro_offset: Vector3::new(0.1, 0.05, -0.2),
            accel_amp: Vector3::new(1.5, 2.0, -1.0),
            accel_freq: Vector3::new(0.9, 0.6, 1.3),
            accel_offset: Vector3::new(0.2, -0.1, 9.81),
        }
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            gyro_amp: vec3(rng, 1.0),
            gyro_freq: Vector3::from_fn(|_, _| rng.random_range(0.2..1.5)),
            gyro_offset: vec3(rng, 0.3),
            accel_amp: vec3(rng, 3.0),
            accel_freq: Vector3::from_fn(|_, _| rng.random_range(0.2..1.5)),
            accel_offset: vec3(rng, 1.0) + Vector3::new(0.0, 0.0, 9.81),
        }
    }

    fn wave(amp: &Vector3<f64>, freq: &Vector3<f64>, offset: &Vector3<f64>, t: f64) -> Vector3<f64> {
        Vector3::from_fn(|i, _| offset[i] + amp[i] * (std::f64::consts::TAU * freq[i] * t + 0.3 * i as f64).sin())
    }

    pub fn gyro(&self, t: f64) -> Vector3<f64> {
        Self::wave(&self.gyro_amp, &self.gyro_freq, &self.gyro_offset, t)
    }

    pub fn accel(&self, t: f64) -> Vector3<f64> {
        Self::wave(&self.accel_amp, &self.accel_freq, &self.accel_offset, t)
    }

    pub fn samples(&self, t0: f64, t1: f64, rate: f64) -> Vec<ImuSample> {
        let n = ((t1 - t0) * rate).round() as usize;
        (0..=n)
            .map(|i| {
                let t = t0 + (t1 - t0) * i as f64 / n as f64;
                ImuSample::new(t, self.gyro(t), self.accel(t))
            })
            .collect()
    }
}

/// Increments `(dR, dv, dp)` in the start frame from RK4 on
/// `R' = R [w]x`, `v' = R a`, `p' = v` at `steps` uniform steps.
pub fn rk4_increments(
    gyro: impl Fn(f64) -> Vector3<f64>,
    accel: impl Fn(f64) -> Vector3<f64>,
    t0: f64,
    t1: f64,
    steps: usize,
) -> (Rot3, Vector3<f64>, Vector3<f64>) {
    type S = (Matrix3<f64>, Vector3<f64>, Vector3<f64>);
    let deriv = |t: f64, s: &S| -> S { (s.0 * hat(&gyro(t)), s.0 * accel(t), s.1) };
    let add = |s: &S, d: &S, h: f64| -> S { (s.0 + d.0 * h, s.1 + d.1 * h, s.2 + d.2 * h) };
    let h = (t1 - t0) / steps as f64;
    let mut s: S = (Matrix3::identity(), Vector3::zeros(), Vector3::zeros());
    for i in 0..steps {
        let t = t0 + h * i as f64;
        let k1 = deriv(t, &s);
        let k2 = deriv(t + 0.5 * h, &add(&s, &k1, 0.5 * h));
        let k3 = deriv(t + 0.5 * h, &add(&s, &k2, 0.5 * h));
        let k4 = deriv(t + h, &add(&s, &k3, h));
        s = (
            s.0 + (k1.0 + k2.0 * 2.0 + k3.0 * 2.0 + k4.0) * (h / 6.0),
            s.1 + (k1.1 + k2.1 * 2.0 + k3.1 * 2.0 + k4.1) * (h / 6.0),
            s.2 + (k1.2 + k2.2 * 2.0 + k3.2 * 2.0 + k4.2) * (h / 6.0),
        );
    }
    (Rot3::from_matrix(&s.0), s.1, s.2)
}

/// Largest relative error of `(dR, dv, dp)` against a reference, rotation
/// by geodesic angle over the reference angle.
pub fn increment_rel_err(
    (r, v, p): (&Rot3, &Vector3<f64>, &Vector3<f64>),
    (r0, v0, p0): (&Rot3, &Vector3<f64>, &Vector3<f64>),
) -> f64 {
    let er = r.angle_to(r0) / r0.log().norm().max(1e-12);
    let ev = (v - v0).norm() / v0.norm().max(1e-12);
    let ep = (p - p0).norm() / p0.norm().max(1e-12);
    er.max(ev).max(ep)
}

/// Prints and returns the acceptance verdict line.
pub fn verdict(name: &str, pass: bool, detail: &str) -> bool {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LieSuite {
    pub so3_round_trip: f64,
    pub so3_exp_log: f64,
    pub se3_round_trip: f64,
    pub jacobian: f64,
}

/// Round trips and every analytic Jacobian against central differences
/// over `n` random samples.
pub fn lie_suite(seed: u64, n: usize) -> LieSuite {
    use gpvio::lie::*;
    let mut r = rng(seed);
    let mut out = LieSuite::default();
    let h = 1e-6;
    for _ in 0..n {
        let phi = rotvec(&mut r, std::f64::consts::PI * 0.999);
        out.so3_round_trip = out.so3_round_trip.max((so3_log(&so3_exp(&phi)) - phi).norm());
        let rot = so3_exp(&phi);
        out.so3_exp_log = out.so3_exp_log.max((so3_exp(&so3_log(&rot)).matrix() - rot.matrix()).norm());

        let xi = Vector6::from_iterator(vec3(&mut r, 3.0).iter().chain(phi.iter()).copied());
        out.se3_round_trip = out.se3_round_trip.max((se3_log(&se3_exp(&xi)) - xi).norm());

        let z3 = DVector::zeros(3);
        let jr = numeric_jacobian(&z3, h, |d| {
            let v = Vector3::new(d[0], d[1], d[2]);
            DVector::from_column_slice(so3_log(&(rot.inverse() * so3_exp(&(phi + v)))).as_slice())
        });
        let jl = numeric_jacobian(&z3, h, |d| {
            let v = Vector3::new(d[0], d[1], d[2]);
            DVector::from_column_slice(so3_log(&(so3_exp(&(phi + v)) * rot.inverse())).as_slice())
        });
        let jr_inv = numeric_jacobian(&z3, h, |d| {
            let v = Vector3::new(d[0], d[1], d[2]);
            DVector::from_column_slice(so3_log(&(rot * so3_exp(&v))).as_slice())
        });
        let jl_inv = numeric_jacobian(&z3, h, |d| {
            let v = Vector3::new(d[0], d[1], d[2]);
            DVector::from_column_slice(so3_log(&(so3_exp(&v) * rot)).as_slice())
        });
        let t = se3_exp(&xi);
        let z6 = DVector::zeros(6);
        let v6 = |d: &DVector<f64>| Vector6::from_column_slice(d.as_slice());
        let sr = numeric_jacobian(&z6, h, |d| DVector::from_column_slice(se3_log(&(t.inverse() * se3_exp(&(xi + v6(d))))).as_slice()));
        let sl = numeric_jacobian(&z6, h, |d| DVector::from_column_slice(se3_log(&(se3_exp(&(xi + v6(d))) * t.inverse())).as_slice()));
        let sr_inv = numeric_jacobian(&z6, h, |d| DVector::from_column_slice(se3_log(&(t * se3_exp(&v6(d)))).as_slice()));
        let sl_inv = numeric_jacobian(&z6, h, |d| DVector::from_column_slice(se3_log(&(se3_exp(&v6(d)) * t)).as_slice()));
        for e in [
            rel_err(&dm(&so3_right_jacobian(&phi)), &jr),
            rel_err(&dm(&so3_left_jacobian(&phi)), &jl),
            rel_err(&dm(&so3_right_jacobian_inv(&phi)), &jr_inv),
            rel_err(&dm(&so3_left_jacobian_inv(&phi)), &jl_inv),
            rel_err(&dm(&se3_right_jacobian(&xi)), &sr),
            rel_err(&dm(&se3_left_jacobian(&xi)), &sl),
            rel_err(&dm(&se3_right_jacobian_inv(&xi)), &sr_inv),
            rel_err(&dm(&se3_left_jacobian_inv(&xi)), &sl_inv),
        ] {
            out.jacobian = out.jacobian.max(e);
        }
    }
    out
}

/// Worst relative error over `spans` random 1 s signals of classical
/// integration at 200 Hz and of the GP query with `num_latent` latent
/// states, both against 20 kHz RK4.
pub fn preint_oracle(seed: u64, spans: usize, num_latent: usize) -> (f64, f64) {
    use gpvio::gp_preint::{fit_latent, GpKernelConfig};
    use gpvio::imu_preint::{integrate, ImuBias, ImuNoiseConfig};
    let mut r = rng(seed);
    let (mut classical, mut gp) = (0.0f64, 0.0f64);
    for i in 0..spans {
        let sig = if i == 0 { Signal::standard() } else { Signal::random(&mut r) };
        let t0 = r.random_range(0.0..5.0);
        let samples = sig.samples(t0, t0 + 1.0, 200.0);
        let (r0, v0, p0) = rk4_increments(|t| sig.gyro(t), |t| sig.accel(t), t0, t0 + 1.0, 20_000);
        let pre = integrate(&samples, ImuBias::zero(), ImuNoiseConfig::default()).unwrap();
        classical = classical.max(increment_rel_err((&pre.delta_r, &pre.delta_v, &pre.delta_p), (&r0, &v0, &p0)));
        let cfg = GpKernelConfig { num_latent, ..Default::default() };
        let q = fit_latent(&samples, ImuBias::zero(), &cfg).unwrap().query(t0 + 1.0).unwrap();
        gp = gp.max(increment_rel_err((&Rot3::exp(&q.delta_r), &q.delta_v, &q.delta_p), (&r0, &v0, &p0)));
    }
    (classical, gp)
}

/// Largest absolute disagreement between classical and GP preintegration
/// at span end: geodesic angle, `|dv|`, `|dp|`.
pub fn cross_backend(seed: u64, spans: usize) -> (f64, f64, f64) {
    use gpvio::gp_preint::{fit_latent, GpKernelConfig};
    use gpvio::imu_preint::{integrate, ImuBias, ImuNoiseConfig};
    let mut r = rng(seed);
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..spans {
        let sig = if i == 0 { Signal::standard() } else { Signal::random(&mut r) };
        let t0 = r.random_range(0.0..5.0);
        let samples = sig.samples(t0, t0 + 1.0, 200.0);
        let pre = integrate(&samples, ImuBias::zero(), ImuNoiseConfig::default()).unwrap();
        let q = fit_latent(&samples, ImuBias::zero(), &GpKernelConfig::default()).unwrap().query(t0 + 1.0).unwrap();
        worst.0 = worst.0.max(pre.delta_r.angle_to(&Rot3::exp(&q.delta_r)));
        worst.1 = worst.1.max((pre.delta_v - q.delta_v).norm());
        worst.2 = worst.2.max((pre.delta_p - q.delta_p).norm());
    }
    worst
}

/// Knot samples of `T(t) = T0 exp(t w)` with body twist `w`.
pub fn constant_velocity_knots(
    t0: &Pose3,
    w: &Vector6<f64>,
    stamps: (f64, f64),
) -> (gpvio::gp_prior::TrajectoryState, gpvio::gp_prior::TrajectoryState) {
    use gpvio::gp_prior::TrajectoryState;
    use gpvio::lie::Twist;
    let at = |t: f64| TrajectoryState::new(t, *t0 * Pose3::exp(&(w * t)), Twist(*w));
    (at(stamps.0), at(stamps.1))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct WnoaSuite {
    pub knot_exactness: f64,
    pub constant_velocity: f64,
    pub prior_residual: f64,
}

pub fn wnoa_suite(seed: u64, pairs: usize) -> WnoaSuite {
    use gpvio::gp_prior::{interpolate, prior_residual, TrajectoryState};
    use gpvio::lie::Twist;
    let mut r = rng(seed);
    let mut out = WnoaSuite::default();
    for _ in 0..pairs {
        let t0 = pose(&mut r);
        let dt = r.random_range(0.01..0.5);
        let start = r.random_range(0.0..10.0);

        // Arbitrary knots: interpolation must return them at the ends.
        let a = TrajectoryState::new(start, t0, Twist(vec6(&mut r, 2.0)));
        let b = TrajectoryState::new(start + dt, t0 * Pose3::exp(&vec6(&mut r, 0.5)), Twist(vec6(&mut r, 2.0)));
        for (x, tau) in [(&a, a.stamp), (&b, b.stamp)] {
            let i = interpolate(&a, &b, tau).unwrap();
            let e = i.pose.local(&x.pose).norm().max((i.velocity.0 - x.velocity.0).norm());
            out.knot_exactness = out.knot_exactness.max(e);
        }

        let w = vec6(&mut r, 2.0);
        let (a, b) = constant_velocity_knots(&t0, &w, (start, start + dt));
        out.prior_residual = out.prior_residual.max(prior_residual(&a, &b).unwrap().amax());
        for _ in 0..100 {
            let tau = r.random_range(a.stamp..b.stamp);
            let i = interpolate(&a, &b, tau).unwrap();
            let truth = t0 * Pose3::exp(&(w * tau));
            let e = i.pose.local(&truth).norm().max((i.velocity.0 - w).norm());
            out.constant_velocity = out.constant_velocity.max(e);
        }
    }
    out
}

/// Simulated scene and a window over its first `knots` knots, with up to
/// `max_landmarks` landmarks inserted at their true positions together with
/// every observation inside the window.
pub struct SmallWindow {
    pub cfg: gpvio::config::ScenarioConfig,
    pub data: gpvio::pipeline::Dataset,
    pub window: gpvio::graph::SlidingWindow,
}

pub fn scenario(zero_noise: bool, duration: f64) -> gpvio::config::ScenarioConfig {
    let mut cfg = gpvio::config::ScenarioConfig::default();
    cfg.trajectory.duration = duration;
    if zero_noise {
        cfg.sim.noise = gpvio::sim::SimNoise::zero();
    }
    cfg
}

pub fn initial_knot(cfg: &gpvio::config::ScenarioConfig, backend: gpvio::graph::Backend) -> gpvio::graph::KnotState {
    let rig = cfg.rig().unwrap();
    let gt = cfg.trajectory.ground_truth(0.0, &rig.gravity).unwrap();
    let s = gpvio::imu_preint::ImuState::new(0.0, gt.pose, gt.world_velocity(), rig.bias);
    gpvio::graph::KnotState::from_imu_state(backend, &s, gt.velocity.angular())
}

pub fn small_window(
    mut cfg: gpvio::config::ScenarioConfig,
    backend: gpvio::graph::Backend,
    knots: usize,
    max_landmarks: usize,
) -> SmallWindow {
    use std::collections::BTreeMap;
    cfg.window.backend = backend;
    cfg.window.min_window_size = 2;
    let data = gpvio::pipeline::simulate(&cfg).unwrap();
    let mut window = gpvio::graph::SlidingWindow::new(cfg.window, cfg.camera.model().unwrap(), initial_knot(&cfg, backend)).unwrap();
    let t_end = (knots - 1) as f64 * cfg.window.knot_interval;
    let imu: Vec<_> = data.imu.iter().copied().filter(|s| s.stamp <= t_end + 1e-9).collect();
    window.push_measurements(&imu, &[], t_end).unwrap();
    assert_eq!(window.knots().len(), knots);

    let mut tracks: BTreeMap<u64, Vec<gpvio::visual::FeatureObservation>> = BTreeMap::new();
    for o in data.tracks.iter().filter(|o| o.stamp <= t_end) {
        tracks.entry(o.track_id).or_default().push(*o);
    }
    for (id, obs) in tracks.into_iter().filter(|(_, o)| o.len() >= 2).take(max_landmarks) {
        let truth = data.landmarks[gpvio::sim::landmark_of_track(id) as usize].position;
        window.insert_landmark(id, truth, &obs).unwrap();
    }
    SmallWindow { cfg, data, window }
}

/// Tells the estimator the sensors are (nearly) exact: small but finite
/// densities so every factor stays well conditioned.
pub fn matched(mut cfg: gpvio::config::ScenarioConfig) -> gpvio::config::ScenarioConfig {
    cfg.window.pixel_sigma = 0.01;
    cfg.window.noise.gyro_noise_density = 1e-5;
    cfg.window.noise.accel_noise_density = 1e-4;
    cfg.window.noise.gyro_bias_walk = 1e-7;
    cfg.window.noise.accel_bias_walk = 1e-6;
    cfg
}
