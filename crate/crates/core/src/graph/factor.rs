use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector3};

use super::marginal::MarginalPrior;
use super::{Backend, GraphError, KnotId, KnotState, LandmarkId, VarKey};
use crate::gp_preint::PoseIncrement;
use crate::gp_prior::{prior_residual, prior_residual_linearized, InterpolationContext};
use crate::imu_preint::{residual_unchecked, ImuNoiseConfig, PreintegratedImu};
use crate::par::{self, Execution};
use crate::visual::{huber, projection_residual, CameraModel, FeatureObservation, Landmark};

/// Solver-level variable: a whole knot block or a landmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Var {
    Knot(KnotId),
    Landmark(LandmarkId),
}

/// Constants shared by all factors of a problem.
#[derive(Clone, Copy, Debug)]
pub struct FactorEnv {
    pub camera: CameraModel,
    pub pixel_sigma: f64,
    pub huber_delta: f64,
    pub noise: ImuNoiseConfig,
}

/// Values of all variables of a problem.
#[derive(Clone, Debug)]
pub struct States {
    pub first_id: KnotId,
    pub knots: Vec<KnotState>,
    pub landmarks: BTreeMap<LandmarkId, Vector3<f64>>,
}

impl States {
    pub fn knot(&self, id: KnotId) -> Result<&KnotState, GraphError> {
        id.checked_sub(self.first_id)
            .and_then(|i| self.knots.get(i as usize))
            .ok_or(GraphError::UnknownVariable(Var::Knot(id)))
    }

    pub fn landmark(&self, id: LandmarkId) -> Result<&Vector3<f64>, GraphError> {
        self.landmarks.get(&id).ok_or(GraphError::UnknownVariable(Var::Landmark(id)))
    }

    pub fn knot_dim(&self) -> usize {
        self.knots.first().map_or(0, |k| k.dim())
    }

    pub fn dimension(&self) -> usize {
        self.knots.iter().map(|k| k.dim()).sum::<usize>() + 3 * self.landmarks.len()
    }

    /// Applies a stacked step: knots in order, then landmarks by id.
    pub fn retract(&self, step: &DVector<f64>) -> States {
        let d = self.knot_dim();
        let knots = self.knots.iter().enumerate().map(|(i, k)| k.retract(&step.as_slice()[i * d..(i + 1) * d])).collect();
        let base = self.knots.len() * d;
        let landmarks = self
            .landmarks
            .iter()
            .enumerate()
            .map(|(j, (id, p))| (*id, p + step.fixed_rows::<3>(base + 3 * j)))
            .collect();
        States { first_id: self.first_id, knots, landmarks }
    }
}

/// Per-evaluation cache of interval interpolation contexts (CT-IMU).
pub struct EvalCache {
    ct: Vec<Option<InterpolationContext>>,
}

impl EvalCache {
    pub fn build(states: &States, jacobians: bool, exec: Execution) -> Self {
        let ct = match states.knots.first() {
            Some(KnotState::Ct { .. }) => par::map_range(exec, states.knots.len().saturating_sub(1), |i| {
                let (KnotState::Ct { motion: a, .. }, KnotState::Ct { motion: b, .. }) = (&states.knots[i], &states.knots[i + 1]) else {
                    return None;
                };
                if jacobians {
                    InterpolationContext::new(a, b).ok()
                } else {
                    InterpolationContext::values_only(a, b).ok()
                }
            }),
            _ => Vec::new(),
        };
        Self { ct }
    }

    fn interval(&self, states: &States, k: KnotId) -> Result<&InterpolationContext, GraphError> {
        let i = (k - states.first_id) as usize;
        self.ct.get(i).and_then(|c| c.as_ref()).ok_or(GraphError::UnknownVariable(Var::Knot(k + 1)))
    }
}

#[derive(Clone, Debug)]
pub enum Factor {
    /// Gaussian prior on a whole knot, used to anchor the gauge.
    KnotPrior { knot: KnotId, mean: KnotState, whitener: DMatrix<f64> },
    /// WNOA motion prior between knots `k` and `k + 1`.
    Wnoa { k: KnotId, whitener: DMatrix<f64> },
    /// Preintegrated IMU between knots `k` and `k + 1`.
    Imu { k: KnotId, preint: Arc<PreintegratedImu>, whitener: DMatrix<f64> },
    /// Projection at a time inside interval `k` of the CT trajectory.
    ProjectionCt { k: KnotId, landmark: LandmarkId, obs: FeatureObservation },
    /// Projection at a time inferred from knot `k` through its latent model.
    ProjectionGp { k: KnotId, landmark: LandmarkId, obs: FeatureObservation, increment: PoseIncrement },
    Marginal(Arc<MarginalPrior>),
}

/// Whitened residual and Jacobian blocks of one factor.
#[derive(Clone, Debug)]
pub struct Linearized {
    pub residual: DVector<f64>,
    pub blocks: Vec<(Var, DMatrix<f64>)>,
    /// Contribution to the objective (robustified for projections).
    pub cost: f64,
}

impl Linearized {
    fn empty() -> Self {
        Self { residual: DVector::zeros(0), blocks: Vec::new(), cost: 0.0 }
    }

    fn gaussian(residual: DVector<f64>, blocks: Vec<(Var, DMatrix<f64>)>) -> Self {
        let cost = residual.norm_squared();
        Self { residual, blocks, cost }
    }
}

/// `W` with `W^T W = cov^-1`.
pub fn whitener(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (cov + cov.transpose()) * 0.5;
    if let Some(ch) = sym.clone().cholesky() {
        let l = ch.l();
        if let Some(inv) = l.solve_lower_triangular(&DMatrix::identity(l.nrows(), l.nrows())) {
            return inv;
        }
    }
    let eig = sym.symmetric_eigen();
    let floor = 1e-15 * eig.eigenvalues.amax().max(1e-300);
    let scale = eig.eigenvalues.map(|e| 1.0 / e.max(floor).sqrt());
    DMatrix::from_diagonal(&scale) * eig.eigenvectors.transpose()
}

fn pad(j: &DMatrix<f64>, cols: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(j.nrows(), cols);
    out.view_mut((0, 0), (j.nrows(), j.ncols())).copy_from(j);
    out
}

impl Factor {
    pub fn vars(&self) -> Vec<Var> {
        match self {
            Factor::KnotPrior { knot, .. } => vec![Var::Knot(*knot)],
            Factor::Wnoa { k, .. } | Factor::Imu { k, .. } => vec![Var::Knot(*k), Var::Knot(*k + 1)],
            Factor::ProjectionCt { k, landmark, .. } => vec![Var::Knot(*k), Var::Knot(*k + 1), Var::Landmark(*landmark)],
            Factor::ProjectionGp { k, landmark, .. } => vec![Var::Knot(*k), Var::Landmark(*landmark)],
            Factor::Marginal(m) => m.vars().collect(),
        }
    }

    /// Variables in the state-vector sense (pose/velocity, bias, IMU
    /// state, landmark) touched by the residual.
    pub fn var_keys(&self, backend: Backend) -> Vec<VarKey> {
        let knot = |k: KnotId| match backend {
            Backend::CtImu => VarKey::Motion(k),
            Backend::GpImu => VarKey::Imu(k),
        };
        match self {
            Factor::Wnoa { k, .. } => vec![VarKey::Motion(*k), VarKey::Motion(*k + 1)],
            Factor::Imu { k, .. } if backend == Backend::CtImu => {
                vec![VarKey::Motion(*k), VarKey::Bias(*k), VarKey::Motion(*k + 1), VarKey::Bias(*k + 1)]
            }
            Factor::ProjectionCt { k, landmark, .. } => {
                vec![VarKey::Motion(*k), VarKey::Motion(*k + 1), VarKey::Landmark(*landmark)]
            }
            Factor::ProjectionGp { k, landmark, .. } => vec![VarKey::Imu(*k), VarKey::Landmark(*landmark)],
            Factor::KnotPrior { knot: k, .. } if backend == Backend::CtImu => vec![VarKey::Motion(*k), VarKey::Bias(*k)],
            _ => self
                .vars()
                .into_iter()
                .flat_map(|v| match v {
                    Var::Knot(k) if backend == Backend::CtImu => vec![VarKey::Motion(k), VarKey::Bias(k)],
                    Var::Knot(k) => vec![knot(k)],
                    Var::Landmark(l) => vec![VarKey::Landmark(l)],
                })
                .collect(),
        }
    }

    pub fn is_projection(&self) -> bool {
        matches!(self, Factor::ProjectionCt { .. } | Factor::ProjectionGp { .. })
    }

    /// Residual, cost and (when `jacobians`) the Jacobian blocks at `states`.
    pub fn evaluate(
        &self,
        states: &States,
        env: &FactorEnv,
        cache: &EvalCache,
        jacobians: bool,
    ) -> Result<Linearized, GraphError> {
        match self {
            Factor::KnotPrior { knot, mean, whitener } => {
                let x = states.knot(*knot)?;
                let r = whitener * mean.local(x);
                let blocks = if jacobians { vec![(Var::Knot(*knot), whitener * mean.local_jacobian(x))] } else { vec![] };
                Ok(Linearized::gaussian(r, blocks))
            }
            Factor::Wnoa { k, whitener } => {
                let (KnotState::Ct { motion: a, .. }, KnotState::Ct { motion: b, .. }) = (states.knot(*k)?, states.knot(*k + 1)?) else {
                    return Err(GraphError::BackendMismatch(Backend::CtImu, Backend::GpImu));
                };
                if !jacobians {
                    let r = prior_residual(a, b)?;
                    return Ok(Linearized::gaussian(whitener * DVector::from_column_slice(r.as_slice()), vec![]));
                }
                let lin = prior_residual_linearized(a, b)?;
                let r = whitener * DVector::from_column_slice(lin.residual.as_slice());
                let jk = DMatrix::from_column_slice(12, 12, lin.jac_k.as_slice());
                let jk1 = DMatrix::from_column_slice(12, 12, lin.jac_k1.as_slice());
                Ok(Linearized::gaussian(
                    r,
                    vec![(Var::Knot(*k), whitener * pad(&jk, 18)), (Var::Knot(*k + 1), whitener * pad(&jk1, 18))],
                ))
            }
            Factor::Imu { k, preint, whitener } => {
                let (a, b) = (states.knot(*k)?, states.knot(*k + 1)?);
                let lin = residual_unchecked(&a.imu_state(), &b.imu_state(), preint, &env.noise);
                let r = whitener * DVector::from_column_slice(lin.residual.as_slice());
                let blocks = if jacobians {
                    let jk = DMatrix::from_column_slice(15, 15, lin.jac_k.as_slice()) * a.imu_tangent_map();
                    let jk1 = DMatrix::from_column_slice(15, 15, lin.jac_k1.as_slice()) * b.imu_tangent_map();
                    vec![(Var::Knot(*k), whitener * jk), (Var::Knot(*k + 1), whitener * jk1)]
                } else {
                    vec![]
                };
                Ok(Linearized::gaussian(r, blocks))
            }
            Factor::ProjectionCt { k, landmark, obs } => {
                let ctx = cache.interval(states, *k)?;
                let l = Landmark { id: *landmark, position: *states.landmark(*landmark)? };
                if !jacobians {
                    let pose = ctx.pose(obs.stamp)?;
                    return Ok(self.robust(&pose, &l, obs, env, None));
                }
                let (pose, jk, jk1) = ctx.pose_with_jacobians(obs.stamp)?;
                let jk = DMatrix::from_column_slice(6, 12, jk.as_slice());
                let jk1 = DMatrix::from_column_slice(6, 12, jk1.as_slice());
                Ok(self.robust(&pose, &l, obs, env, Some(&[(Var::Knot(*k), pad(&jk, 18)), (Var::Knot(*k + 1), pad(&jk1, 18))])))
            }
            Factor::ProjectionGp { k, landmark, obs, increment } => {
                let anchor = states.knot(*k)?.imu_state();
                let l = Landmark { id: *landmark, position: *states.landmark(*landmark)? };
                let (pose, j) = increment.apply(&anchor, &env.noise.gravity);
                if !jacobians {
                    return Ok(self.robust(&pose, &l, obs, env, None));
                }
                let j = DMatrix::from_column_slice(6, 15, j.as_slice());
                Ok(self.robust(&pose, &l, obs, env, Some(&[(Var::Knot(*k), j)])))
            }
            Factor::Marginal(m) => m.evaluate(states, jacobians),
        }
    }

    // Huber-weighted pixel residual; `pose_jacs` maps the body-pose
    // perturbation onto each knot block.
    fn robust(
        &self,
        pose: &crate::lie::Pose3,
        landmark: &Landmark,
        obs: &FeatureObservation,
        env: &FactorEnv,
        pose_jacs: Option<&[(Var, DMatrix<f64>)]>,
    ) -> Linearized {
        let Ok(lin) = projection_residual(pose, &env.camera, landmark, obs) else {
            return Linearized::empty();
        };
        let (cost, weight) = huber(&lin.residual, env.pixel_sigma, env.huber_delta);
        let scale = weight.sqrt() / env.pixel_sigma;
        let residual = DVector::from_column_slice((lin.residual * scale).as_slice());
        let mut blocks = Vec::new();
        if let Some(jacs) = pose_jacs {
            let jp = DMatrix::from_column_slice(2, 6, lin.jac_pose.as_slice()) * scale;
            for (var, j) in jacs {
                blocks.push((*var, &jp * j));
            }
            blocks.push((Var::Landmark(landmark.id), DMatrix::from_column_slice(2, 3, lin.jac_landmark.as_slice()) * scale));
        }
        Linearized { residual, blocks, cost }
    }
}
