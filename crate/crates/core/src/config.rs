//! TOML configuration of the hopper benchmark.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hopper::{planning_rest_state, HopperModel, HopperParams, HopperSimulator, PhaseCost, PhaseCostParams};
use crate::linalg::Vector;
use crate::model::NoiseModel;
use crate::planner::PlanOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemConfig {
    pub horizon: usize,
    /// Hip height of the resting initial state.
    pub initial_hip_height: f64,
    pub init: InitKind,
    pub true_start: TrueStart,
}

/// Mean of the true initial state in closed-loop rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrueStart {
    /// The plant's resting state with the planned foot extension.
    #[default]
    PlantRest,
    /// The planned initial state.
    Planned,
}

/// Initial guess handed to the planner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Zero controls rolled out from the initial state (feasible).
    #[default]
    Rollout,
    /// States interpolated from rest to the jump target and back (infeasible).
    Interpolate,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            horizon: 100,
            initial_hip_height: 0.5,
            init: InitKind::Rollout,
            true_start: TrueStart::PlantRest,
        }
    }
}

/// Diagonal variances of the process, measurement and initial-state noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub process: [f64; 4],
    pub measurement: [f64; 4],
    pub initial: [f64; 4],
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            process: [1e-3; 4],
            measurement: [1e-3; 4],
            initial: [1e-3; 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub tol: f64,
    /// Step lengths `2^0, 2^-1, ..., 2^-min_step_exponent`.
    pub min_step_exponent: i32,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tol: 1e-12,
            min_step_exponent: 10,
        }
    }
}

impl SolverConfig {
    pub fn options(&self) -> PlanOptions {
        PlanOptions {
            alphas: (0..=self.min_step_exponent).map(|i| 0.5f64.powi(i)).collect(),
            max_iters: self.max_iters,
            tol: self.tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FallbackPolicy {
    /// A filter breakdown ends the rollout and marks it aborted.
    #[default]
    Abort,
    /// Redo the failing filter step risk-neutrally.
    RiskNeutral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub rollouts: usize,
    pub seed: u64,
    pub sigmas: Vec<f64>,
    pub exclude_diverged: bool,
    pub filter_fallback: FallbackPolicy,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            rollouts: 100,
            seed: 42,
            sigmas: vec![0.0, -0.5, 10.0],
            exclude_diverged: false,
            filter_fallback: FallbackPolicy::Abort,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct HopperConfig {
    pub problem: ProblemConfig,
    pub noise: NoiseConfig,
    pub cost: PhaseCostParams,
    pub model: HopperParams,
    pub solver: SolverConfig,
    pub experiment: ExperimentConfig,
}

impl HopperConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let c = &m.contact;
        let checks = [
            (self.problem.horizon >= 2, "horizon must be at least 2"),
            (m.dt > 0.0, "dt must be positive"),
            (m.mass > 0.0, "mass must be positive"),
            (m.substeps >= 1, "substeps must be at least 1"),
            (c.planning_stiffness > 0.0, "planning stiffness must be positive"),
            (c.smoothing > 0.0, "contact smoothing must be positive"),
            (c.sim_stiffness > 0.0, "simulation stiffness must be positive"),
            (c.sim_damping >= 0.0, "simulation damping must be non-negative"),
            (self.solver.max_iters >= 1, "max_iters must be at least 1"),
            (self.solver.min_step_exponent >= 0, "min_step_exponent must be non-negative"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        let variances = self.noise.process.iter().chain(&self.noise.measurement).chain(&self.noise.initial);
        if variances.into_iter().any(|v| v.is_nan() || *v <= 0.0) {
            return Err(Error::Config("noise variances must be positive".into()));
        }
        Ok(())
    }

    pub fn planning_model(&self) -> HopperModel {
        HopperModel::new(self.model.clone())
    }

    pub fn simulator(&self) -> HopperSimulator {
        HopperSimulator::new(self.model.clone())
    }

    pub fn cost(&self) -> PhaseCost {
        PhaseCost::new(self.cost.clone(), self.problem.horizon)
    }

    pub fn initial_state(&self) -> Vector {
        planning_rest_state(&self.model, self.problem.initial_hip_height)
    }

    pub fn noise_model(&self) -> NoiseModel {
        NoiseModel::diagonal(
            &self.noise.process,
            &self.noise.measurement,
            &self.noise.initial,
            self.initial_state(),
        )
        .expect("validated variances are positive")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = HopperConfig::default();
        assert_eq!(HopperConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = HopperConfig::from_toml("[experiment]\nrollouts = 7\n").unwrap();
        assert_eq!(cfg.experiment.rollouts, 7);
        assert_eq!(cfg.model.contact.sim_stiffness, 1e5);
        assert_eq!(cfg.cost.jump_target[0], 2.0);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(HopperConfig::from_toml("[model]\nmas = 2.0\n").is_err());
        assert!(HopperConfig::from_toml("[model]\ndt = -0.01\n").is_err());
        assert!(HopperConfig::from_toml("[noise]\nprocess = [0.0, 1.0, 1.0, 1.0]\n").is_err());
    }

    #[test]
    fn contact_frame_is_selectable() {
        let cfg = HopperConfig::from_toml("[model.contact]\nframe = \"printed\"\n").unwrap();
        assert_eq!(cfg.model.contact.frame, crate::hopper::ContactFrame::Printed);
    }
}
