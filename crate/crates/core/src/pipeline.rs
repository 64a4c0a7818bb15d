//! End-to-end runs: simulate a dataset, run a back-end over it in
//! knot-interval batches, and evaluate against ground truth.

use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::config::{InitMode, ScenarioConfig};
use crate::error::Result;
use crate::graph::{solve, Backend, KnotState, SlidingWindow, SolveStatus};
use crate::imu_preint::{ImuBias, ImuSample};
use crate::io::{self, StampedPose, TimingRow};
use crate::metrics::{self, MetricsReport};
use crate::sim::{synthesize_imu, synthesize_tracks};
use crate::visual::{FeatureObservation, Landmark};

pub const IMU_FILE: &str = "imu.csv";
pub const TRACKS_FILE: &str = "tracks.csv";
pub const GROUND_TRUTH_FILE: &str = "groundtruth.tum";

#[derive(Clone, Debug)]
pub struct Dataset {
    pub imu: Vec<ImuSample>,
    pub tracks: Vec<FeatureObservation>,
    /// Ground truth at every IMU stamp.
    pub ground_truth: Vec<StampedPose>,
    pub landmarks: Vec<Landmark>,
}

pub fn simulate(cfg: &ScenarioConfig) -> Result<Dataset> {
    let rig = cfg.rig()?;
    let landmarks = cfg.landmarks.generate(cfg.seed)?;
    let imu = synthesize_imu(&cfg.trajectory, &rig, cfg.seed)?;
    let tracks = synthesize_tracks(&cfg.trajectory, &rig, &landmarks, cfg.seed, cfg.window.execution)?;
    let ground_truth = imu
        .iter()
        .map(|s| Ok(StampedPose { stamp: s.stamp, pose: cfg.trajectory.ground_truth(s.stamp, &rig.gravity)?.pose }))
        .collect::<Result<_>>()?;
    Ok(Dataset { imu, tracks, ground_truth, landmarks })
}

impl Dataset {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        io::write_imu_csv(&dir.join(IMU_FILE), &self.imu)?;
        io::write_tracks_csv(&dir.join(TRACKS_FILE), &self.tracks)?;
        io::write_tum(&dir.join(GROUND_TRUTH_FILE), &self.ground_truth)?;
        Ok(())
    }

    /// Reads a dataset written by [`Dataset::write`]; landmark positions are
    /// not stored.
    pub fn read(dir: &Path) -> Result<Self> {
        Ok(Self {
            imu: io::read_imu_csv(&dir.join(IMU_FILE))?,
            tracks: io::read_tracks_csv(&dir.join(TRACKS_FILE))?,
            ground_truth: io::read_tum(&dir.join(GROUND_TRUTH_FILE))?,
            landmarks: Vec::new(),
        })
    }
}

/// Wall-clock totals per back-end stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub steps: usize,
    pub optimization_s: f64,
    pub marginalization_s: f64,
    pub preintegration_s: f64,
    pub other_s: f64,
    pub total_s: f64,
}

/// Non-timing outcome of a run; identical across repeated runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub backend: Backend,
    pub steps: usize,
    pub stalled_steps: usize,
    pub max_iteration_steps: usize,
    pub triangulated: usize,
    pub dropped_observations: usize,
    pub marginalized_landmarks: usize,
    pub floored_eigenvalues: usize,
    pub final_knots: usize,
    pub final_landmarks: usize,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    /// One pose per knot, taken when the knot leaves the window (or at the
    /// end of the run).
    pub trajectory: Vec<StampedPose>,
    pub timing: Vec<TimingRow>,
    pub stages: StageTimes,
    pub summary: RunSummary,
}

fn initial_knot(cfg: &ScenarioConfig, backend: Backend, t0: f64) -> Result<KnotState> {
    let rig = cfg.rig()?;
    let gt = cfg.trajectory.ground_truth(t0, &rig.gravity)?;
    let state = match cfg.init {
        InitMode::GroundTruth => crate::imu_preint::ImuState::new(t0, gt.pose, gt.world_velocity(), rig.bias),
        InitMode::Rest => crate::imu_preint::ImuState::new(t0, gt.pose, nalgebra::Vector3::zeros(), ImuBias::zero()),
    };
    let angular = match cfg.init {
        InitMode::GroundTruth => gt.velocity.angular(),
        InitMode::Rest => nalgebra::Vector3::zeros(),
    };
    Ok(KnotState::from_imu_state(backend, &state, angular))
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Runs `backend` over `data`, one knot interval per step:
/// push, solve, then marginalize down to the minimum window size.
pub fn run(cfg: &ScenarioConfig, data: &Dataset, backend: Backend) -> Result<RunOutput> {
    let start_all = Instant::now();
    let wcfg = crate::graph::WindowConfig { backend, ..cfg.window };
    let t0 = data.imu.first().map_or(0.0, |s| s.stamp);
    let t_end = data.imu.last().map_or(0.0, |s| s.stamp);
    let mut window = SlidingWindow::new(wcfg, cfg.camera.model()?, initial_knot(cfg, backend, t0)?)?;
    let mut trajectory = Vec::new();
    let mut timing = Vec::new();
    let mut stages = StageTimes::default();
    let mut summary = RunSummary { backend, ..Default::default() };
    let (mut imu_i, mut obs_i) = (0, 0);
    let steps = ((t_end - t0) / wcfg.knot_interval + 1e-9).floor() as usize;

    for step in 1..=steps {
        let now = window.knot_stamp(step as u64);
        let imu_j = imu_i + data.imu[imu_i..].partition_point(|s| s.stamp <= now + 1e-9);
        let obs_j = obs_i + data.tracks[obs_i..].partition_point(|o| o.stamp <= now + 1e-9);
        window.push_measurements(&data.imu[imu_i..imu_j], &data.tracks[obs_i..obs_j], now)?;
        (imu_i, obs_i) = (imu_j, obs_j);

        let t = Instant::now();
        let report = solve(&mut window)?;
        let solve_time = t.elapsed();
        log::debug!(
            "step {step}: {:?} after {} iterations, cost {:.3e} -> {:.3e}, {} factors, dim {}, {:.1} ms",
            report.status,
            report.iterations,
            report.initial_cost,
            report.final_cost,
            report.factors,
            report.dimension,
            ms(solve_time)
        );
        match report.status {
            SolveStatus::Stalled => {
                summary.stalled_steps += 1;
                log::warn!("step {step}: solver stalled at cost {:.6e}", report.final_cost);
            }
            SolveStatus::MaxIterations => summary.max_iteration_steps += 1,
            SolveStatus::Converged => {}
        }

        let t = Instant::now();
        while window.knots().len() > wcfg.min_window_size {
            let k = window.knots()[0];
            trajectory.push(StampedPose { stamp: k.stamp(), pose: k.pose() });
            window.marginalize()?;
        }
        let marg_time = t.elapsed();
        let preint_time = window.take_preintegration_time();

        stages.optimization_s += solve_time.saturating_sub(preint_time).as_secs_f64();
        stages.marginalization_s += marg_time.as_secs_f64();
        stages.preintegration_s += preint_time.as_secs_f64();
        timing.push(TimingRow { stamp: now, factors: report.factors, solve_ms: ms(solve_time), marg_ms: ms(marg_time) });
    }
    trajectory.extend(window.knots().iter().map(|k| StampedPose { stamp: k.stamp(), pose: k.pose() }));

    let st = window.stats();
    summary.steps = steps;
    summary.triangulated = st.triangulated;
    summary.dropped_observations = st.dropped_observations;
    summary.marginalized_landmarks = st.marginalized_landmarks;
    summary.floored_eigenvalues = st.floored_eigenvalues;
    summary.final_knots = window.knots().len();
    summary.final_landmarks = window.landmarks().len();
    stages.steps = steps;
    stages.total_s = start_all.elapsed().as_secs_f64();
    stages.other_s = (stages.total_s - stages.optimization_s - stages.marginalization_s - stages.preintegration_s).max(0.0);
    Ok(RunOutput { trajectory, timing, stages, summary })
}

impl RunOutput {
    pub fn write(&self, dir: &Path, backend: Backend) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        io::write_tum(&dir.join(format!("{backend}.tum")), &self.trajectory)?;
        io::write_timing_csv(&dir.join(format!("{backend}_timing.csv")), &self.timing)?;
        let stages = serde_json::to_string_pretty(&self.stages).expect("plain data");
        std::fs::write(dir.join(format!("{backend}_stages.json")), stages)?;
        Ok(())
    }
}

pub fn evaluate(cfg: &ScenarioConfig, est: &[StampedPose], reference: &[StampedPose]) -> Result<MetricsReport> {
    Ok(metrics::evaluate(est, reference, cfg.evaluation.horizon, &cfg.evaluation.deltas)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendResult {
    pub summary: RunSummary,
    pub metrics: MetricsReport,
}

/// Accuracy comparison of both back-ends on one dataset. Timing lives in
/// [`StageTimes`] so this report is reproducible byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub seed: u64,
    pub duration_s: f64,
    pub path_length_m: f64,
    pub results: Vec<BackendResult>,
}

impl CompareReport {
    /// Plain-text table: one row per back-end, one column per segment length.
    pub fn table(&self) -> String {
        let mut out = String::from("backend");
        let deltas: Vec<f64> = self.results.first().map(|r| r.metrics.rte.iter().map(|e| e.delta).collect()).unwrap_or_default();
        for d in &deltas {
            out += &format!("  rte@{d}s[m]  yaw@{d}s[deg]");
        }
        out.push('\n');
        for r in &self.results {
            out += &format!("{}", r.summary.backend);
            for e in &r.metrics.rte {
                let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
                out += &format!("  {:>10}  {:>12}", f(e.translation_rms_m), f(e.yaw_rms_deg));
            }
            out.push('\n');
        }
        out
    }
}

pub struct Comparison {
    pub report: CompareReport,
    pub runs: Vec<(Backend, RunOutput)>,
}

pub fn compare(cfg: &ScenarioConfig, data: &Dataset) -> Result<Comparison> {
    let mut results = Vec::new();
    let mut runs = Vec::new();
    for backend in [Backend::CtImu, Backend::GpImu] {
        let out = run(cfg, data, backend)?;
        let metrics = evaluate(cfg, &out.trajectory, &data.ground_truth)?;
        results.push(BackendResult { summary: out.summary, metrics });
        runs.push((backend, out));
    }
    let report = CompareReport {
        seed: cfg.seed,
        duration_s: cfg.trajectory.duration,
        path_length_m: cfg.trajectory.path_length(&cfg.window.noise.gravity),
        results,
    };
    Ok(Comparison { report, runs })
}
