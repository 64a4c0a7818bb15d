use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gpvio::config::ScenarioConfig;
use gpvio::graph::{solve, Backend, KnotState, SlidingWindow, WindowConfig};
use gpvio::imu_preint::ImuState;
use gpvio::par::Execution;
use gpvio::pipeline::{simulate, Dataset};

/// A full window after `steps` knot intervals, ready for the next solve.
fn filled_window(cfg: &ScenarioConfig, data: &Dataset, backend: Backend, exec: Execution, steps: u64) -> SlidingWindow {
    let wcfg = WindowConfig { backend, execution: exec, ..cfg.window };
    let rig = cfg.rig().unwrap();
    let gt = cfg.trajectory.ground_truth(0.0, &rig.gravity).unwrap();
    let x0 = ImuState::new(0.0, gt.pose, gt.world_velocity(), rig.bias);
    let mut w = SlidingWindow::new(wcfg, cfg.camera.model().unwrap(), KnotState::from_imu_state(backend, &x0, gt.velocity.angular())).unwrap();
    let (mut i, mut j) = (0, 0);
    for step in 1..=steps {
        let now = w.knot_stamp(step);
        let i1 = i + data.imu[i..].partition_point(|s| s.stamp <= now + 1e-9);
        let j1 = j + data.tracks[j..].partition_point(|o| o.stamp <= now + 1e-9);
        w.push_measurements(&data.imu[i..i1], &data.tracks[j..j1], now).unwrap();
        (i, j) = (i1, j1);
        solve(&mut w).unwrap();
        while w.knots().len() > wcfg.min_window_size {
            w.marginalize().unwrap();
        }
    }
    w
}

fn window_solve(c: &mut Criterion) {
    let mut cfg = ScenarioConfig::default();
    cfg.trajectory.duration = 5.0;
    let data = simulate(&cfg).unwrap();
    let mut group = c.benchmark_group("window_solve");
    group.sample_size(10);
    for backend in [Backend::CtImu, Backend::GpImu] {
        for exec in [Execution::Sequential, Execution::Parallel] {
            let base = filled_window(&cfg, &data, backend, exec, 60);
            group.bench_with_input(BenchmarkId::new(backend.to_string(), format!("{exec:?}")), &base, |b, base| {
                b.iter_batched(|| base.clone(), |mut w| solve(&mut w).unwrap(), criterion::BatchSize::LargeInput)
            });
        }
    }
    group.finish();
}

fn track_synthesis(c: &mut Criterion) {
    let mut cfg = ScenarioConfig::default();
    cfg.landmarks.count = 200;
    let rig = cfg.rig().unwrap();
    let landmarks = cfg.landmarks.generate(1).unwrap();
    let mut group = c.benchmark_group("track_synthesis");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_function(format!("{exec:?}"), |b| {
            b.iter(|| gpvio::sim::synthesize_tracks(&cfg.trajectory, &rig, &landmarks, 1, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, window_solve, track_synthesis);
criterion_main!(benches);
