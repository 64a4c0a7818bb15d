//! Window bookkeeping: knot grid, measurement association, triangulation of
//! pending tracks and marginalization of the oldest knot.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::factor::{whitener, Factor, FactorEnv, States, Var};
use super::marginal::{marginalize_variables, MarginalPrior, MarginalizationReport};
use super::solver::NonlinearProblem;
use super::{Backend, GraphError, KnotId, KnotState, LandmarkId, WindowConfig};
use crate::gp_preint::{fit_latent, interpolate_pose, GpKernelConfig, LatentGpModel};
use crate::gp_prior::{prior_covariance, InterpolationContext, WnoaConfig};
use crate::imu_preint::{integrate, predict, samples_between, ImuBias, ImuSample, PreintegratedImu};
use crate::lie::Pose3;
use crate::visual::{camera_from_world, triangulate, CameraModel, FeatureObservation};

/// Inertial data of one knot interval.
#[derive(Clone, Debug)]
pub struct Interval {
    pub preint: Arc<PreintegratedImu>,
    /// Latent model, GP-IMU only.
    pub model: Option<Arc<LatentGpModel>>,
    whitener: DMatrix<f64>,
}

/// Observation attached to the knot interval containing its stamp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionObs {
    pub k: KnotId,
    pub obs: FeatureObservation,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    /// Observations older than the window start, dropped on arrival or at
    /// marginalization.
    pub dropped_observations: usize,
    pub triangulated: usize,
    pub triangulation_attempts: usize,
    pub marginalized_knots: usize,
    pub marginalized_landmarks: usize,
    /// Eigenvalues raised to the floor during marginalization.
    pub floored_eigenvalues: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PushReport {
    pub new_knots: usize,
    pub associated: usize,
    pub dropped: usize,
    pub triangulated: usize,
}

#[derive(Clone, Debug, Default)]
struct PendingTrack {
    obs: Vec<ProjectionObs>,
    attempted_len: usize,
}

#[derive(Clone, Debug)]
pub struct SlidingWindow {
    cfg: WindowConfig,
    env: FactorEnv,
    origin: f64,
    first_id: KnotId,
    knots: Vec<KnotState>,
    intervals: Vec<Interval>,
    landmarks: BTreeMap<LandmarkId, Vector3<f64>>,
    projections: BTreeMap<LandmarkId, Vec<ProjectionObs>>,
    pending: BTreeMap<u64, PendingTrack>,
    /// Observations newer than the last knot.
    queued: Vec<FeatureObservation>,
    retired: BTreeSet<u64>,
    imu: Vec<ImuSample>,
    anchor: Option<Factor>,
    marginal: Option<Arc<MarginalPrior>>,
    wnoa_whitener: DMatrix<f64>,
    stats: WindowStats,
    preint_time: Duration,
}

impl SlidingWindow {
    /// Starts a window at `initial`, which also fixes the grid origin and is
    /// anchored by a tight prior.
    pub fn new(cfg: WindowConfig, camera: CameraModel, initial: KnotState) -> Result<Self, GraphError> {
        cfg.validate()?;
        if initial.backend() != cfg.backend {
            return Err(GraphError::BackendMismatch(cfg.backend, initial.backend()));
        }
        let wnoa = prior_covariance(&WnoaConfig::isotropic(cfg.qc), cfg.knot_interval)?;
        let env = FactorEnv { camera, pixel_sigma: cfg.pixel_sigma, huber_delta: cfg.huber_delta, noise: cfg.noise };
        let anchor = Factor::KnotPrior { knot: 0, mean: initial, whitener: whitener(&anchor_covariance(&cfg)) };
        Ok(Self {
            env,
            origin: initial.stamp(),
            first_id: 0,
            knots: vec![initial],
            intervals: Vec::new(),
            landmarks: BTreeMap::new(),
            projections: BTreeMap::new(),
            pending: BTreeMap::new(),
            queued: Vec::new(),
            retired: BTreeSet::new(),
            imu: Vec::new(),
            anchor: Some(anchor),
            marginal: None,
            wnoa_whitener: whitener(&DMatrix::from_column_slice(12, 12, wnoa.as_slice())),
            stats: WindowStats::default(),
            preint_time: Duration::ZERO,
            cfg,
        })
    }

    pub fn backend(&self) -> Backend {
        self.cfg.backend
    }

    pub fn config(&self) -> &WindowConfig {
        &self.cfg
    }

    pub fn env(&self) -> &FactorEnv {
        &self.env
    }

    pub fn first_id(&self) -> KnotId {
        self.first_id
    }

    pub fn knots(&self) -> &[KnotState] {
        &self.knots
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn landmarks(&self) -> &BTreeMap<LandmarkId, Vector3<f64>> {
        &self.landmarks
    }

    pub fn projections(&self) -> &BTreeMap<LandmarkId, Vec<ProjectionObs>> {
        &self.projections
    }

    pub fn pending_tracks(&self) -> usize {
        self.pending.len()
    }

    pub fn marginal_prior(&self) -> Option<&MarginalPrior> {
        self.marginal.as_deref()
    }

    pub fn stats(&self) -> &WindowStats {
        &self.stats
    }

    /// Time spent integrating or fitting IMU data since the last call.
    pub fn take_preintegration_time(&mut self) -> Duration {
        std::mem::take(&mut self.preint_time)
    }

    pub fn knot_stamp(&self, id: KnotId) -> f64 {
        self.origin + id as f64 * self.cfg.knot_interval
    }

    fn last_id(&self) -> KnotId {
        self.first_id + self.knots.len() as u64 - 1
    }

    fn start_stamp(&self) -> f64 {
        self.knot_stamp(self.first_id)
    }

    fn end_stamp(&self) -> f64 {
        self.knot_stamp(self.last_id())
    }

    pub fn states(&self) -> States {
        States { first_id: self.first_id, knots: self.knots.clone(), landmarks: self.landmarks.clone() }
    }

    pub fn set_states(&mut self, states: States) -> Result<(), GraphError> {
        if states.first_id != self.first_id || states.knots.len() != self.knots.len() {
            return Err(GraphError::Dimension { expected: self.knots.len(), actual: states.knots.len() });
        }
        if !states.landmarks.keys().eq(self.landmarks.keys()) {
            return Err(GraphError::Dimension { expected: self.landmarks.len(), actual: states.landmarks.len() });
        }
        self.knots = states.knots;
        self.landmarks = states.landmarks;
        Ok(())
    }

    fn kernel_config(&self) -> GpKernelConfig {
        GpKernelConfig { num_latent: self.cfg.latent_per_interval(), ..self.cfg.kernel }
    }

    fn make_interval(&mut self, t0: f64, t1: f64, bias: ImuBias) -> Result<Interval, GraphError> {
        let start = Instant::now();
        let samples = samples_between(&self.imu, t0, t1)?;
        let (preint, model) = match self.cfg.backend {
            Backend::CtImu => (integrate(&samples, bias, self.cfg.noise)?, None),
            Backend::GpImu => {
                let model = fit_latent(&samples, bias, &self.kernel_config())?;
                (model.to_preintegrated(self.cfg.noise)?, Some(Arc::new(model)))
            }
        };
        let cov = preint.residual_covariance();
        let interval = Interval {
            whitener: whitener(&DMatrix::from_column_slice(15, 15, cov.as_slice())),
            preint: Arc::new(preint),
            model,
        };
        self.preint_time += start.elapsed();
        Ok(interval)
    }

    /// Re-integrates every interval whose start-knot bias has moved away
    /// from the bias it was integrated at.
    pub fn refresh_preintegration(&mut self) -> Result<(), GraphError> {
        for i in 0..self.intervals.len() {
            let bias = self.knots[i].bias();
            if self.intervals[i].preint.bias_lin.needs_reintegration(&bias) {
                let (t0, t1) = (self.knots[i].stamp(), self.knots[i + 1].stamp());
                self.intervals[i] = self.make_interval(t0, t1, bias)?;
            }
        }
        Ok(())
    }

    /// Adds IMU samples and feature observations, grows the knot grid up to
    /// `now` and triangulates pending tracks.
    pub fn push_measurements(
        &mut self,
        imu: &[ImuSample],
        tracks: &[FeatureObservation],
        now: f64,
    ) -> Result<PushReport, GraphError> {
        let mut report = PushReport::default();
        for s in imu {
            if self.imu.last().is_none_or(|l| s.stamp > l.stamp) {
                self.imu.push(*s);
            }
        }
        self.queued.extend_from_slice(tracks);

        // Grow the grid while the IMU stream covers the next knot.
        let imu_end = self.imu.last().map_or(f64::NEG_INFINITY, |s| s.stamp);
        loop {
            let next = self.knot_stamp(self.last_id() + 1);
            if next > now + 1e-9 || next > imu_end + 1e-9 {
                break;
            }
            let last = *self.knots.last().expect("window holds at least one knot");
            let t0 = last.stamp();
            let t1 = next.min(imu_end);
            let interval = self.make_interval(t0, t1, last.bias())?;
            let predicted = predict(&last.imu_state(), &interval.preint, &self.cfg.noise);
            let gyro = self.imu[self.imu.partition_point(|s| s.stamp <= t1) - 1].gyro;
            let knot = KnotState::from_imu_state(self.cfg.backend, &predicted, gyro - last.bias().gyro_bias).with_stamp(next);
            self.knots.push(knot);
            self.intervals.push(interval);
            report.new_knots += 1;
        }

        // Associate everything the grid now covers.
        let (start, end) = (self.start_stamp(), self.end_stamp());
        let queued = std::mem::take(&mut self.queued);
        let mut touched = BTreeSet::new();
        for obs in queued {
            if obs.stamp < start - 1e-12 || self.retired.contains(&obs.track_id) {
                report.dropped += 1;
                continue;
            }
            if obs.stamp > end + 1e-12 || self.knots.len() < 2 {
                self.queued.push(obs);
                continue;
            }
            let k = self.interval_of(obs.stamp);
            let p = ProjectionObs { k, obs };
            report.associated += 1;
            if let Some(list) = self.projections.get_mut(&obs.track_id) {
                list.push(p);
            } else {
                self.pending.entry(obs.track_id).or_default().obs.push(p);
                touched.insert(obs.track_id);
            }
        }
        self.stats.dropped_observations += report.dropped;

        for id in touched {
            if self.try_triangulate(id)? {
                report.triangulated += 1;
            }
        }
        Ok(report)
    }

    fn interval_of(&self, stamp: f64) -> KnotId {
        let raw = ((stamp - self.origin) / self.cfg.knot_interval).floor();
        let k = if raw <= self.first_id as f64 { self.first_id } else { raw as KnotId };
        k.min(self.last_id() - 1)
    }

    /// Body pose at `stamp` inside interval `k`, from the current estimates.
    pub fn pose_at(&self, k: KnotId, stamp: f64) -> Result<Pose3, GraphError> {
        let i = (k - self.first_id) as usize;
        match (&self.knots[i], &self.knots[i + 1]) {
            (KnotState::Ct { motion: a, .. }, KnotState::Ct { motion: b, .. }) => {
                Ok(InterpolationContext::values_only(a, b)?.pose(stamp)?)
            }
            (KnotState::Gp(a), _) => {
                let model = self.intervals[i].model.as_ref().expect("GP intervals carry a latent model");
                Ok(interpolate_pose(a, model, stamp, &self.cfg.noise.gravity)?.0)
            }
            _ => Err(GraphError::BackendMismatch(self.cfg.backend, self.knots[i].backend())),
        }
    }

    fn try_triangulate(&mut self, id: u64) -> Result<bool, GraphError> {
        let Some(track) = self.pending.get(&id) else { return Ok(false) };
        if track.obs.len() < self.cfg.min_track_length || track.obs.len() <= track.attempted_len {
            return Ok(false);
        }
        let views = track
            .obs
            .iter()
            .map(|p| Ok((camera_from_world(&self.pose_at(p.k, p.obs.stamp)?, &self.env.camera), p.obs.pixel)))
            .collect::<Result<Vec<(Pose3, Vector2<f64>)>, GraphError>>()?;
        self.stats.triangulation_attempts += 1;
        match triangulate(&views, &self.env.camera, &self.cfg.triangulation) {
            Ok(point) => {
                let track = self.pending.remove(&id).expect("checked above");
                self.landmarks.insert(id, point);
                self.projections.insert(id, track.obs);
                self.stats.triangulated += 1;
                Ok(true)
            }
            Err(_) => {
                let n = track.obs.len();
                self.pending.get_mut(&id).expect("checked above").attempted_len = n;
                Ok(false)
            }
        }
    }

    /// Inserts a landmark with its observations directly, bypassing
    /// triangulation. Observations must lie inside the window.
    pub fn insert_landmark(&mut self, id: LandmarkId, position: Vector3<f64>, obs: &[FeatureObservation]) -> Result<(), GraphError> {
        if self.knots.len() < 2 {
            return Err(GraphError::TooShort(self.knots.len()));
        }
        let (start, end) = (self.start_stamp(), self.end_stamp());
        let mut list = Vec::with_capacity(obs.len());
        for o in obs {
            if o.stamp < start - 1e-12 || o.stamp > end + 1e-12 {
                return Err(GraphError::UnknownVariable(Var::Landmark(id)));
            }
            list.push(ProjectionObs { k: self.interval_of(o.stamp), obs: *o });
        }
        self.pending.remove(&id);
        self.landmarks.insert(id, position);
        self.projections.insert(id, list);
        Ok(())
    }

    /// All factors of the live window.
    pub fn factors(&self) -> Result<Vec<Factor>, GraphError> {
        let mut out = Vec::new();
        out.extend(self.anchor.clone());
        for (i, iv) in self.intervals.iter().enumerate() {
            let k = self.first_id + i as u64;
            if self.cfg.backend == Backend::CtImu {
                out.push(Factor::Wnoa { k, whitener: self.wnoa_whitener.clone() });
            }
            out.push(Factor::Imu { k, preint: iv.preint.clone(), whitener: iv.whitener.clone() });
        }
        for (&landmark, list) in &self.projections {
            for p in list {
                out.push(match self.cfg.backend {
                    Backend::CtImu => Factor::ProjectionCt { k: p.k, landmark, obs: p.obs },
                    Backend::GpImu => {
                        let model = self.intervals[(p.k - self.first_id) as usize].model.as_ref().expect("GP intervals carry a latent model");
                        let increment = model.pose_increment(p.obs.stamp)?;
                        Factor::ProjectionGp { k: p.k, landmark, obs: p.obs, increment }
                    }
                });
            }
        }
        out.extend(self.marginal.clone().map(Factor::Marginal));
        Ok(out)
    }

    pub fn problem(&self) -> Result<NonlinearProblem, GraphError> {
        Ok(NonlinearProblem {
            backend: self.cfg.backend,
            factors: self.factors()?,
            env: self.env,
            states: self.states(),
            execution: self.cfg.execution,
        })
    }

    /// Removes the oldest knot together with every landmark seen only from
    /// its interval, folding their factors into the marginal prior.
    pub fn marginalize(&mut self) -> Result<MarginalizationReport, GraphError> {
        if self.knots.len() <= self.cfg.min_window_size || self.knots.len() < 2 {
            return Err(GraphError::TooShort(self.knots.len()));
        }
        let k0 = self.first_id;
        let mut remove = BTreeSet::from([Var::Knot(k0)]);
        let gone: Vec<LandmarkId> = self
            .landmarks
            .keys()
            .copied()
            .filter(|id| self.projections.get(id).is_none_or(|l| l.iter().all(|p| p.k == k0)))
            .collect();
        remove.extend(gone.iter().map(|&id| Var::Landmark(id)));

        let factors: Vec<Factor> = self
            .factors()?
            .into_iter()
            .filter(|f| matches!(f, Factor::Marginal(_)) || f.vars().iter().any(|v| remove.contains(v)))
            .collect();
        let states = self.states();
        let (prior, floored) = marginalize_variables(&factors, &remove, &states, &self.env, self.cfg.execution)?;

        self.marginal = prior.map(Arc::new);
        if matches!(self.anchor, Some(Factor::KnotPrior { knot, .. }) if knot == k0) {
            self.anchor = None;
        }
        self.knots.remove(0);
        self.intervals.remove(0);
        self.first_id += 1;
        for id in &gone {
            self.landmarks.remove(id);
            self.projections.remove(id);
            self.retired.insert(*id);
        }
        for list in self.projections.values_mut() {
            list.retain(|p| p.k != k0);
        }
        let start = self.start_stamp();
        let mut dropped = 0;
        for track in self.pending.values_mut() {
            let before = track.obs.len();
            track.obs.retain(|p| p.obs.stamp >= start - 1e-12);
            for p in &mut track.obs {
                p.k = p.k.max(self.first_id);
            }
            dropped += before - track.obs.len();
            track.attempted_len = track.attempted_len.min(track.obs.len());
        }
        self.pending.retain(|_, t| !t.obs.is_empty());
        let keep = self.imu.partition_point(|s| s.stamp <= start).saturating_sub(1);
        self.imu.drain(..keep);

        self.stats.dropped_observations += dropped;
        self.stats.marginalized_knots += 1;
        self.stats.marginalized_landmarks += gone.len();
        self.stats.floored_eigenvalues += floored;
        Ok(MarginalizationReport { knots: vec![k0], landmarks: gone, factors: factors.len(), floored })
    }
}

fn anchor_covariance(cfg: &WindowConfig) -> DMatrix<f64> {
    let a = &cfg.anchor;
    let sig: Vec<f64> = match cfg.backend {
        Backend::CtImu => [[a.position; 3], [a.rotation; 3], [a.velocity; 3], [a.velocity; 3], [a.accel_bias; 3], [a.gyro_bias; 3]].concat(),
        Backend::GpImu => [[a.position; 3], [a.rotation; 3], [a.velocity; 3], [a.accel_bias; 3], [a.gyro_bias; 3]].concat(),
    };
    DMatrix::from_diagonal(&DVector::from_iterator(sig.len(), sig.iter().map(|s| s * s)))
}
