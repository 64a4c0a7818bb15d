//! Levenberg-Marquardt on the product manifold of the window variables.

use serde::{Deserialize, Serialize};

use super::factor::{EvalCache, Factor, FactorEnv, Linearized, States};
use super::linear::LinearSystem;
use super::window::SlidingWindow;
use super::{Backend, GraphError};
use crate::par::{self, Execution};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Stop once an accepted step lowers the cost by less than this
    /// fraction.
    pub rel_tol: f64,
    /// Stop once the step norm falls below this.
    pub step_tol: f64,
    pub initial_lambda: f64,
    pub max_lambda: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { max_iters: 20, rel_tol: 1e-6, step_tol: 1e-10, initial_lambda: 1e-4, max_lambda: 1e10 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), GraphError> {
        if self.max_iters == 0 {
            return Err(GraphError::Config("solver max_iters must be positive"));
        }
        if !(self.rel_tol >= 0.0 && self.step_tol >= 0.0 && self.initial_lambda > 0.0 && self.max_lambda > self.initial_lambda) {
            return Err(GraphError::Config("solver tolerances must be non-negative and damping increasing"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    /// No damping level produced a cost decrease; states hold the best
    /// iterate.
    Stalled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub dimension: usize,
    pub knots: usize,
    pub landmarks: usize,
    pub factors: usize,
}

/// Factors and variable values of one window, ready to optimize.
#[derive(Clone, Debug)]
pub struct NonlinearProblem {
    pub backend: Backend,
    pub factors: Vec<Factor>,
    pub env: FactorEnv,
    pub states: States,
    pub execution: Execution,
}

impl NonlinearProblem {
    /// `n * 18 + m * 3` for CT-IMU, `n * 15 + m * 3` for GP-IMU.
    pub fn expected_dimension(&self) -> usize {
        self.states.knots.len() * self.backend.knot_dim() + 3 * self.states.landmarks.len()
    }

    pub fn dimension(&self) -> usize {
        self.states.dimension()
    }

    fn evaluate(&self, states: &States, jacobians: bool) -> Result<Vec<Linearized>, GraphError> {
        let cache = EvalCache::build(states, jacobians, self.execution);
        par::map(self.execution, &self.factors, |f| f.evaluate(states, &self.env, &cache, jacobians))
            .into_iter()
            .collect()
    }

    pub fn cost_at(&self, states: &States) -> Result<f64, GraphError> {
        // Summed in factor order so both execution policies agree bitwise.
        Ok(self.evaluate(states, false)?.iter().map(|l| l.cost).sum())
    }

    pub fn cost(&self) -> Result<f64, GraphError> {
        self.cost_at(&self.states)
    }

    /// Normal equations at `states` together with the cost there.
    pub fn linearize_at(&self, states: &States) -> Result<(LinearSystem, f64), GraphError> {
        let lins = self.evaluate(states, true)?;
        let mut sys = LinearSystem::new(
            states.first_id,
            states.knots.len(),
            states.knot_dim(),
            states.landmarks.keys().copied(),
        );
        let mut cost = 0.0;
        for l in &lins {
            sys.add(l)?;
            cost += l.cost;
        }
        Ok((sys, cost))
    }

    pub fn optimize(&mut self, cfg: &SolverConfig) -> Result<SolveReport, GraphError> {
        let dimension = self.dimension();
        let expected = self.expected_dimension();
        if dimension != expected {
            return Err(GraphError::Dimension { expected, actual: dimension });
        }
        let mut cost = self.cost()?;
        let initial_cost = cost;
        let mut lambda = cfg.initial_lambda;
        let mut status = SolveStatus::MaxIterations;
        let mut iterations = 0;
        while iterations < cfg.max_iters {
            iterations += 1;
            let (sys, _) = self.linearize_at(&self.states)?;
            let mut accepted = None;
            while lambda <= cfg.max_lambda {
                if let Ok(step) = sys.solve(lambda) {
                    if step.norm() < cfg.step_tol {
                        accepted = Some((self.states.clone(), cost, true));
                        break;
                    }
                    let trial = self.states.retract(&step);
                    let trial_cost = self.cost_at(&trial)?;
                    if trial_cost.is_finite() && trial_cost < cost {
                        accepted = Some((trial, trial_cost, false));
                        lambda = (lambda * 0.1).max(1e-12);
                        break;
                    }
                }
                lambda *= 10.0;
            }
            let Some((states, new_cost, tiny_step)) = accepted else {
                status = SolveStatus::Stalled;
                break;
            };
            let decrease = cost - new_cost;
            self.states = states;
            let old = cost;
            cost = new_cost;
            if tiny_step || decrease <= cfg.rel_tol * old || new_cost == 0.0 {
                status = SolveStatus::Converged;
                break;
            }
        }
        Ok(SolveReport {
            status,
            iterations,
            initial_cost,
            final_cost: cost,
            dimension,
            knots: self.states.knots.len(),
            landmarks: self.states.landmarks.len(),
            factors: self.factors.len(),
        })
    }
}

pub fn build_ct_imu(window: &SlidingWindow) -> Result<NonlinearProblem, GraphError> {
    if window.backend() != Backend::CtImu {
        return Err(GraphError::BackendMismatch(Backend::CtImu, window.backend()));
    }
    window.problem()
}

pub fn build_gp_imu(window: &SlidingWindow) -> Result<NonlinearProblem, GraphError> {
    if window.backend() != Backend::GpImu {
        return Err(GraphError::BackendMismatch(Backend::GpImu, window.backend()));
    }
    window.problem()
}

/// Builds the window's problem, optimizes it and writes the result back.
pub fn solve(window: &mut SlidingWindow) -> Result<SolveReport, GraphError> {
    window.refresh_preintegration()?;
    let mut problem = window.problem()?;
    let cfg = window.config().solver;
    let report = problem.optimize(&cfg)?;
    window.set_states(problem.states)?;
    Ok(report)
}
