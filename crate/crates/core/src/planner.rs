//! The planning loop: backward pass, backtracking line search over the
//! approximated risk cost with partial contraction of the feasibility gaps,
//! and relinearization on acceptance.

use serde::{Deserialize, Serialize};

use crate::backward::{backward_pass, BackwardPassResult};
use crate::error::{Error, Result};
use crate::linalg::{all_finite_vec, serde_mat, Mat, Vector};
use crate::model::{linearize, CostModel, Linearization, NoiseModel, SystemModel, Trajectory};
use crate::risk_cost::evaluate_risk_cost;

pub const PLAN_FORMAT_VERSION: u32 = 1;

/// Largest feedforward norm the stress controller may drop.
pub const FEEDFORWARD_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOptions {
    /// Step lengths tried in order; the first one that does not increase the
    /// merit is accepted.
    pub alphas: Vec<f64>,
    pub max_iters: usize,
    /// Convergence threshold on `|J_{i+1} - J_i|`.
    pub tol: f64,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            alphas: (0..=10).map(|i| 0.5f64.powi(i)).collect(),
            max_iters: 500,
            tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    Converged,
    /// No step length in the schedule decreased the merit; the current
    /// iterate is returned.
    LineSearchStalled,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub alpha: f64,
    pub max_gap: f64,
    pub regularization: f64,
    pub feedforward_norm: f64,
}

/// Converged nominal plus everything the run-time stage needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanArtifacts {
    pub format_version: u32,
    pub sigma: f64,
    pub status: PlanStatus,
    pub cost: f64,
    pub trajectory: Trajectory,
    #[serde(with = "serde_mat::vectors")]
    pub k: Vec<Vector>,
    #[serde(with = "serde_mat::matrices")]
    pub big_k: Vec<Mat>,
    #[serde(with = "serde_mat::matrices")]
    pub big_v: Vec<Mat>,
    #[serde(with = "serde_mat::vectors")]
    pub v: Vec<Vector>,
    pub log: Vec<IterationRecord>,
}

impl PlanArtifacts {
    pub fn horizon(&self) -> usize {
        self.trajectory.horizon()
    }

    pub fn max_feedforward_norm(&self) -> f64 {
        self.k.iter().map(|k| k.norm()).fold(0.0, f64::max)
    }

    pub fn feedforward_negligible(&self) -> bool {
        self.max_feedforward_norm() <= FEEDFORWARD_TOLERANCE
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(s)?;
        if plan.format_version != PLAN_FORMAT_VERSION {
            return Err(Error::PlanVersion(plan.format_version));
        }
        Ok(plan)
    }
}

/// Applies `u' = u - alpha k - K (x' - x)` and
/// `x'_{t+1} = f(x'_t, u'_t) - (1 - alpha) gap_t`, starting from `x'_0 = x_0`.
pub fn forward_pass(
    model: &dyn SystemModel,
    traj: &Trajectory,
    k: &[Vector],
    big_k: &[Mat],
    alpha: f64,
) -> Result<Trajectory> {
    let horizon = traj.horizon();
    let mut states = Vec::with_capacity(horizon + 1);
    let mut controls = Vec::with_capacity(horizon);
    let mut gaps = Vec::with_capacity(horizon);
    states.push(traj.states[0].clone());
    for t in 0..horizon {
        let dx = &states[t] - &traj.states[t];
        let u = &traj.controls[t] - &k[t] * alpha - &big_k[t] * dx;
        let propagated = model.step(t, &states[t], &u);
        let next = &propagated - &traj.gaps[t] * (1.0 - alpha);
        if !all_finite_vec(&u) || !all_finite_vec(&next) {
            return Err(Error::NonFinite {
                step: t,
                what: "forward pass state",
            });
        }
        gaps.push(propagated - &next);
        controls.push(u);
        states.push(next);
    }
    Ok(Trajectory {
        states,
        controls,
        gaps,
    })
}

/// Initial guess that linearly interpolates the states between waypoints
/// `(knot, state)` with zero controls. The result is generally infeasible.
pub fn interpolated_init(model: &dyn SystemModel, waypoints: &[(usize, Vector)], horizon: usize) -> Result<Trajectory> {
    if waypoints.is_empty() || waypoints[0].0 != 0 {
        return Err(Error::Config("interpolation needs a waypoint at knot 0".into()));
    }
    let mut states = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        let after = waypoints.iter().position(|(k, _)| *k >= t);
        let x = match after {
            Some(i) if waypoints[i].0 == t || i == 0 => waypoints[i].1.clone(),
            Some(i) => {
                let (t0, x0) = &waypoints[i - 1];
                let (t1, x1) = &waypoints[i];
                let s = (t - t0) as f64 / (t1 - t0) as f64;
                x0 * (1.0 - s) + x1 * s
            }
            None => waypoints[waypoints.len() - 1].1.clone(),
        };
        states.push(x);
    }
    let controls = vec![Vector::zeros(model.control_dim()); horizon];
    Trajectory::from_knots(model, states, controls)
}

/// Plans with the risk-sensitive backward pass and the approximated risk cost.
pub fn solve(
    model: &dyn SystemModel,
    cost: &dyn CostModel,
    noise: &NoiseModel,
    sigma: f64,
    init: Trajectory,
    opts: &PlanOptions,
) -> Result<PlanArtifacts> {
    solve_with(
        model,
        cost,
        init,
        opts,
        sigma,
        |lin| backward_pass(lin, noise, sigma),
        |lin| evaluate_risk_cost(lin, noise, sigma).map(|b| b.total),
    )
}

/// The iteration shared by the risk-sensitive planner and the baseline:
/// `direction` supplies the gains and `merit` ranks line-search candidates.
pub(crate) fn solve_with(
    model: &dyn SystemModel,
    cost: &dyn CostModel,
    init: Trajectory,
    opts: &PlanOptions,
    sigma: f64,
    direction: impl Fn(&Linearization) -> Result<BackwardPassResult>,
    merit: impl Fn(&Linearization) -> Result<f64>,
) -> Result<PlanArtifacts> {
    let mut traj = init;
    let mut lin = linearize(model, cost, &traj)?;
    traj.gaps = lin.steps.iter().map(|s| s.gap.clone()).collect();
    let mut current = merit(&lin)?;
    let mut log = vec![IterationRecord {
        iteration: 0,
        cost: current,
        alpha: 0.0,
        max_gap: traj.max_gap_norm(),
        regularization: 0.0,
        feedforward_norm: 0.0,
    }];
    let mut status = PlanStatus::MaxIterations;

    for iteration in 1..=opts.max_iters {
        let gains = direction(&lin)?;
        let mut accepted = None;
        for &alpha in &opts.alphas {
            let Ok(candidate) = forward_pass(model, &traj, &gains.k, &gains.big_k, alpha) else {
                continue;
            };
            let Ok(cand_lin) = linearize(model, cost, &candidate) else {
                continue;
            };
            // Ill-posed or non-finite candidates count as +inf.
            let Ok(value) = merit(&cand_lin) else {
                continue;
            };
            if value <= current {
                accepted = Some((alpha, candidate, cand_lin, value));
                break;
            }
        }
        let Some((alpha, candidate, cand_lin, value)) = accepted else {
            status = PlanStatus::LineSearchStalled;
            break;
        };
        let change = (value - current).abs();
        traj = candidate;
        lin = cand_lin;
        current = value;
        log.push(IterationRecord {
            iteration,
            cost: value,
            alpha,
            max_gap: traj.max_gap_norm(),
            regularization: gains.max_mu,
            feedforward_norm: gains.max_feedforward_norm(),
        });
        if change <= opts.tol {
            status = PlanStatus::Converged;
            break;
        }
    }

    let gains = direction(&lin)?;
    Ok(PlanArtifacts {
        format_version: PLAN_FORMAT_VERSION,
        sigma,
        status,
        cost: current,
        trajectory: traj,
        k: gains.k,
        big_k: gains.big_k,
        big_v: gains.big_v,
        v: gains.v,
        log,
    })
}
