//! Monte-Carlo comparison of the risk-sensitive controller against the
//! risk-neutral baseline on the hopper, plus persistence of the results.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{ilqg_solve, KalmanController};
use crate::config::{FallbackPolicy, HopperConfig, InitKind, TrueStart};
use crate::error::{Error, Result};
use crate::filter::{Controller, FilterFallback, StressController};
use crate::hopper::{simulator_rest_state, HopperModel, HopperSimulator, SimStep, QH, STATE_DIM};
use crate::linalg::{Mat, Vector};
use crate::model::{linearize, CostModel, LinearModel, NoiseModel, SystemModel, Trajectory};
use crate::planner::{interpolated_init, solve, PlanArtifacts, PlanStatus};

pub const PLAN_FILE_VERSION: u32 = 1;

/// Plan together with the configuration it was computed for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub version: u32,
    pub config: HopperConfig,
    pub plan: PlanArtifacts,
}

impl PlanFile {
    pub fn new(config: HopperConfig, plan: PlanArtifacts) -> Self {
        Self {
            version: PLAN_FILE_VERSION,
            config,
            plan,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if file.version != PLAN_FILE_VERSION {
            return Err(Error::PlanVersion(file.version));
        }
        // Re-validate the artifact version as well.
        PlanArtifacts::from_json(&serde_json::to_string(&file.plan)?)?;
        Ok(file)
    }
}

/// Initial guess for the hopper planner.
pub fn initial_trajectory(cfg: &HopperConfig, kind: InitKind) -> Result<Trajectory> {
    let model = cfg.planning_model();
    let horizon = cfg.problem.horizon;
    let x0 = cfg.initial_state();
    match kind {
        InitKind::Rollout => Trajectory::rollout(&model, x0, vec![Vector::zeros(1); horizon]),
        InitKind::Interpolate => {
            let mut apex = x0.clone();
            apex[QH] += cfg.cost.jump_target[QH] - cfg.cost.stance_target[QH];
            interpolated_init(&model, &[(0, x0.clone()), (horizon / 2, apex), (horizon, x0)], horizon)
        }
    }
}

/// Plans one scenario: the iLQG baseline for `sigma == 0`, the risk-sensitive
/// planner otherwise.
pub fn plan_scenario(cfg: &HopperConfig, sigma: f64, init: Trajectory) -> Result<PlanArtifacts> {
    let model = cfg.planning_model();
    let cost = cfg.cost();
    let noise = cfg.noise_model();
    let opts = cfg.solver.options();
    if sigma == 0.0 {
        ilqg_solve(&model, &cost, &noise, init, &opts)
    } else {
        solve(&model, &cost, &noise, sigma, init, &opts)
    }
}

/// Advances the true system over one control interval.
pub trait Plant: Sync {
    fn advance(&self, t: usize, x: &Vector, u: &Vector, w: &Vector) -> SimStep;

    /// The plant's resting state nearest to the planned initial state.
    fn rest_state(&self, planned: &Vector) -> Vector {
        planned.clone()
    }
}

impl Plant for HopperSimulator {
    fn rest_state(&self, planned: &Vector) -> Vector {
        simulator_rest_state(&self.params, planned)
    }

    fn advance(&self, _t: usize, x: &Vector, u: &Vector, w: &Vector) -> SimStep {
        self.simulate_step(x, u[0], w)
    }
}

impl Plant for LinearModel {
    fn advance(&self, t: usize, x: &Vector, u: &Vector, w: &Vector) -> SimStep {
        let state = self.step(t, x, u) + w;
        SimStep {
            diverged: !state.iter().all(|v| v.is_finite()),
            state,
            force: 0.0,
        }
    }
}

/// The planning model used as the plant (plan replay).
pub struct PlanningPlant<'a>(pub &'a HopperModel);

impl Plant for PlanningPlant<'_> {
    fn advance(&self, t: usize, x: &Vector, u: &Vector, w: &Vector) -> SimStep {
        let state = self.0.step(t, x, u) + w;
        let diverged = !state.iter().all(|v| v.is_finite()) || state[QH].abs() > self.0.params.divergence_limit;
        SimStep {
            force: self.0.contact_force(x),
            state,
            diverged,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub scenario: String,
    pub sigma: f64,
    pub index: usize,
    pub seed: u64,
    /// `x_0 .. x_T`, shorter if the rollout diverged or was aborted.
    pub states: Vec<Vector>,
    pub controls: Vec<Vector>,
    /// `y_{t+1}`, the measurement taken after applying `u_t`.
    pub observations: Vec<Vector>,
    pub forces: Vec<f64>,
    /// Running costs followed by the terminal cost when the rollout completed.
    pub step_costs: Vec<f64>,
    /// Accumulated cost `L`.
    pub cost: f64,
    /// `x_t - x^n_t`.
    pub tracking_error: Vec<Vector>,
    pub diverged: bool,
    pub aborted: bool,
    pub fallbacks: usize,
}

impl RolloutRecord {
    pub fn completed(&self) -> bool {
        !self.diverged && !self.aborted
    }
}

/// Sub-stream identifier of one rollout of one scenario.
pub fn rollout_stream(scenario: usize, index: usize) -> u64 {
    ((scenario as u64) << 32) | index as u64
}

fn gaussian(rng: &mut ChaCha8Rng, sqrt: &Mat) -> Vector {
    let z = Vector::from_fn(sqrt.ncols(), |_, _| StandardNormal.sample(rng));
    sqrt * z
}

/// Noise switches for a rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSwitches {
    pub initial: bool,
    pub process: bool,
    pub measurement: bool,
}

impl NoiseSwitches {
    pub const ALL: Self = Self {
        initial: true,
        process: true,
        measurement: true,
    };
    pub const NONE: Self = Self {
        initial: false,
        process: false,
        measurement: false,
    };
}

/// Everything a single closed-loop rollout needs.
pub struct RolloutSetup<'a> {
    pub model: &'a dyn SystemModel,
    pub plant: &'a dyn Plant,
    pub cost: &'a dyn CostModel,
    pub noise: &'a NoiseModel,
    pub plan: &'a PlanArtifacts,
    /// Mean of the true initial state.
    pub initial_state: &'a Vector,
    pub switches: NoiseSwitches,
}

/// Runs one closed-loop rollout. A controller error aborts the rollout.
pub fn run_rollout(setup: &RolloutSetup<'_>, controller: &mut dyn Controller, mut rng: ChaCha8Rng) -> RolloutRecordBody {
    let plan = setup.plan;
    let horizon = plan.horizon();
    let draw = |rng: &mut ChaCha8Rng, on: bool, sqrt: &Mat| {
        if on {
            gaussian(rng, sqrt)
        } else {
            Vector::zeros(sqrt.nrows())
        }
    };

    let mut x = setup.initial_state + draw(&mut rng, setup.switches.initial, setup.noise.initial_cov.sqrt());
    let mut body = RolloutRecordBody::default();
    body.tracking_error.push(&x - &plan.trajectory.states[0]);
    body.states.push(x.clone());
    for t in 0..horizon {
        let u = match controller.control() {
            Ok(u) => u,
            Err(_) => {
                body.aborted = true;
                break;
            }
        };
        let gamma = draw(&mut rng, setup.switches.measurement, setup.noise.measurement(t).sqrt());
        let w = draw(&mut rng, setup.switches.process, setup.noise.process(t).sqrt());
        let y = setup.model.observe(t, &x) + gamma;
        let step = setup.plant.advance(t, &x, &u, &w);
        body.step_costs.push(setup.cost.running_value(t, &x, &u));
        body.forces.push(step.force);
        body.controls.push(u.clone());
        body.observations.push(y.clone());
        x = step.state;
        body.tracking_error.push(&x - &plan.trajectory.states[t + 1]);
        body.states.push(x.clone());
        if step.diverged {
            body.diverged = true;
            break;
        }
        if controller.observe(&u, &y).is_err() {
            body.aborted = true;
            break;
        }
    }
    if body.diverged || body.states.len() == horizon + 1 {
        body.step_costs.push(setup.cost.terminal_value(&x));
    }
    body.cost = body.step_costs.iter().sum();
    body
}

/// Traces of a rollout without its identifying header.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutRecordBody {
    pub states: Vec<Vector>,
    pub controls: Vec<Vector>,
    pub observations: Vec<Vector>,
    pub forces: Vec<f64>,
    pub step_costs: Vec<f64>,
    pub cost: f64,
    pub tracking_error: Vec<Vector>,
    pub diverged: bool,
    pub aborted: bool,
    pub fallbacks: usize,
}

/// One scenario of an experiment: a plan and its sensitivity.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    /// Position among the configured sensitivities; selects the noise streams.
    pub index: usize,
    pub plan: PlanArtifacts,
}

pub fn scenario_name(sigma: f64) -> String {
    if sigma == 0.0 {
        "ddp".to_string()
    } else {
        format!("sigma_{sigma}")
    }
}

/// Runs `n_rollouts` closed-loop rollouts of a scenario in parallel.
#[allow(clippy::too_many_arguments)]
pub fn run_scenario(
    cfg: &HopperConfig,
    scenario: &Scenario,
    plant: &dyn Plant,
    switches: NoiseSwitches,
    n_rollouts: usize,
    seed: u64,
) -> Result<Vec<RolloutRecord>> {
    let model = cfg.planning_model();
    let cost = cfg.cost();
    let noise = cfg.noise_model();
    let lin = linearize(&model, &cost, &scenario.plan.trajectory)?;
    let planned_start = &scenario.plan.trajectory.states[0];
    let initial_state = match cfg.problem.true_start {
        TrueStart::PlantRest => plant.rest_state(planned_start),
        TrueStart::Planned => planned_start.clone(),
    };
    let setup = RolloutSetup {
        model: &model,
        plant,
        cost: &cost,
        noise: &noise,
        plan: &scenario.plan,
        initial_state: &initial_state,
        switches,
    };
    let fallback = match cfg.experiment.filter_fallback {
        FallbackPolicy::Abort => FilterFallback::Abort,
        FallbackPolicy::RiskNeutral => FilterFallback::RiskNeutral,
    };
    let sigma = scenario.plan.sigma;
    let records = (0..n_rollouts)
        .into_par_iter()
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(rollout_stream(scenario.index, index));
            let body = if sigma == 0.0 {
                let mut ctrl = KalmanController::new(&model, &scenario.plan, &lin, &noise);
                run_rollout(&setup, &mut ctrl, rng)
            } else {
                let mut ctrl = StressController::new(&model, &scenario.plan, &lin, &noise, fallback);
                let body = run_rollout(&setup, &mut ctrl, rng);
                RolloutRecordBody {
                    fallbacks: ctrl.fallbacks,
                    ..body
                }
            };
            RolloutRecord {
                scenario: scenario.name.clone(),
                sigma,
                index,
                seed,
                states: body.states,
                controls: body.controls,
                observations: body.observations,
                forces: body.forces,
                step_costs: body.step_costs,
                cost: body.cost,
                tracking_error: body.tracking_error,
                diverged: body.diverged,
                aborted: body.aborted,
                fallbacks: body.fallbacks,
            }
        })
        .collect();
    Ok(records)
}

/// Mean and sample standard deviation (Welford); `None` for an empty input.
pub fn mean_std(values: impl IntoIterator<Item = f64>) -> Option<(f64, f64)> {
    let mut count = 0usize;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for x in values {
        count += 1;
        let delta = x - mean;
        mean += delta / count as f64;
        m2 += delta * (x - mean);
    }
    match count {
        0 => None,
        1 => Some((mean, 0.0)),
        _ => Some((mean, (m2 / (count - 1) as f64).sqrt())),
    }
}

/// Plan-side quantities reported next to the rollout statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub scenario: String,
    pub sigma: f64,
    pub status: PlanStatus,
    pub iterations: usize,
    pub cost: f64,
    pub hip_apex: f64,
    pub max_gap: f64,
    pub max_feedforward_norm: f64,
    /// Whether the feedforward term dropped by the stress controller is
    /// below the guard tolerance.
    pub feedforward_negligible: bool,
}

impl PlanReport {
    pub fn new(scenario: &Scenario) -> Self {
        let plan = &scenario.plan;
        Self {
            scenario: scenario.name.clone(),
            sigma: plan.sigma,
            status: plan.status,
            iterations: plan.log.len() - 1,
            cost: plan.cost,
            hip_apex: plan.trajectory.states.iter().map(|x| x[QH]).fold(f64::NEG_INFINITY, f64::max),
            max_gap: plan.trajectory.max_gap_norm(),
            max_feedforward_norm: plan.max_feedforward_norm(),
            feedforward_negligible: plan.feedforward_negligible(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario: String,
    pub sigma: f64,
    pub n: usize,
    pub diverged: usize,
    pub aborted: usize,
    pub fallbacks: usize,
    pub cost_mean: Option<f64>,
    pub cost_std: Option<f64>,
    /// Largest standard deviation of a single step's cost over time.
    pub max_step_cost_std: Option<f64>,
    /// Per state, the largest `|mean|` of the tracking error over time.
    pub tracking_max_mean: Option<Vec<f64>>,
    /// Per state, the largest standard deviation of the tracking error over time.
    pub tracking_max_std: Option<Vec<f64>>,
    /// Largest mean contact force before / from the jump knot on.
    pub takeoff_force: Option<f64>,
    pub landing_force: Option<f64>,
    /// Largest mean hip height and absolute foot height over time.
    pub hip_apex: Option<f64>,
    pub foot_apex: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub seed: u64,
    pub rollouts: usize,
    pub exclude_diverged: bool,
    pub plans: Vec<PlanReport>,
    pub plan_failures: Vec<PlanFailure>,
    pub scenarios: Vec<ScenarioSummary>,
}

/// A sensitivity whose plan could not be computed; it has no rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFailure {
    pub scenario: String,
    pub sigma: f64,
    pub error: String,
}

impl ExperimentSummary {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn scenario(&self, name: &str) -> Option<&ScenarioSummary> {
        self.scenarios.iter().find(|s| s.scenario == name)
    }

    pub fn plan(&self, name: &str) -> Option<&PlanReport> {
        self.plans.iter().find(|s| s.scenario == name)
    }
}

/// Per-time mean and std over the records that reach `t`.
fn time_stats(records: &[&RolloutRecord], len: usize, value: impl Fn(&RolloutRecord, usize) -> Option<f64>) -> Vec<Option<(f64, f64)>> {
    (0..len)
        .map(|t| mean_std(records.iter().filter_map(|r| value(r, t))))
        .collect()
}

fn max_of(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    values.into_iter().fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
}

/// Aggregates the records of one scenario.
pub fn summarize_scenario(
    name: &str,
    sigma: f64,
    records: &[RolloutRecord],
    exclude_diverged: bool,
    foot_height: impl Fn(&Vector) -> f64,
) -> ScenarioSummary {
    let used: Vec<&RolloutRecord> = records
        .iter()
        .filter(|r| !r.aborted && !(exclude_diverged && r.diverged))
        .collect();
    let horizon = used.iter().map(|r| r.controls.len()).max().unwrap_or(0);
    let cost_stats = mean_std(used.iter().map(|r| r.cost));
    let step_cost = time_stats(&used, horizon + 1, |r, t| r.step_costs.get(t).copied());
    let hip = time_stats(&used, horizon + 1, |r, t| r.states.get(t).map(|x| x[QH]));
    let foot = time_stats(&used, horizon + 1, |r, t| r.states.get(t).map(&foot_height));
    let force = time_stats(&used, horizon, |r, t| r.forces.get(t).copied());
    let tracking: Vec<Vec<Option<(f64, f64)>>> = (0..STATE_DIM)
        .map(|i| time_stats(&used, horizon + 1, |r, t| r.tracking_error.get(t).map(|e| e[i])))
        .collect();

    let means = |s: &[Option<(f64, f64)>]| s.iter().flatten().map(|(m, _)| *m).collect::<Vec<_>>();
    let stds = |s: &[Option<(f64, f64)>]| s.iter().flatten().map(|(_, sd)| *sd).collect::<Vec<_>>();
    let tracking_max_mean: Option<Vec<f64>> = tracking
        .iter()
        .map(|s| max_of(means(s).into_iter().map(f64::abs)))
        .collect();
    let tracking_max_std: Option<Vec<f64>> = tracking.iter().map(|s| max_of(stds(s))).collect();
    let half = horizon / 2;

    ScenarioSummary {
        scenario: name.to_string(),
        sigma,
        n: used.len(),
        diverged: records.iter().filter(|r| r.diverged).count(),
        aborted: records.iter().filter(|r| r.aborted).count(),
        fallbacks: records.iter().map(|r| r.fallbacks).sum(),
        cost_mean: cost_stats.map(|s| s.0),
        cost_std: cost_stats.map(|s| s.1),
        max_step_cost_std: max_of(stds(&step_cost)),
        tracking_max_mean,
        tracking_max_std,
        takeoff_force: max_of(means(&force[..half.min(force.len())])),
        landing_force: max_of(means(&force[half.min(force.len())..])),
        hip_apex: max_of(means(&hip)),
        foot_apex: max_of(means(&foot)),
    }
}

/// Result of a complete experiment.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub summary: ExperimentSummary,
    pub records: Vec<RolloutRecord>,
    pub scenarios: Vec<Scenario>,
}

/// Summary of already simulated records, grouped by the scenarios in `plans`.
pub fn summarize(
    cfg: &HopperConfig,
    plans: Vec<PlanReport>,
    plan_failures: Vec<PlanFailure>,
    records: &[RolloutRecord],
    seed: u64,
    rollouts: usize,
) -> ExperimentSummary {
    let frame = cfg.model.contact.frame;
    let scenarios = plans
        .iter()
        .map(|p| {
            let own: Vec<RolloutRecord> = records.iter().filter(|r| r.scenario == p.scenario).cloned().collect();
            summarize_scenario(&p.scenario, p.sigma, &own, cfg.experiment.exclude_diverged, |x| frame.foot_height(x))
        })
        .collect();
    ExperimentSummary {
        seed,
        rollouts,
        exclude_diverged: cfg.experiment.exclude_diverged,
        plans,
        plan_failures,
        scenarios,
    }
}

/// Plans of an experiment and the sensitivities that failed to plan.
#[derive(Debug, Clone, Default)]
pub struct PlannedScenarios {
    pub scenarios: Vec<Scenario>,
    pub failures: Vec<PlanFailure>,
}

/// Simulates every planned scenario against the stiff-contact simulator.
pub fn run_experiment(cfg: &HopperConfig, planned: PlannedScenarios, n_rollouts: usize, seed: u64) -> Result<ExperimentOutput> {
    let sim = cfg.simulator();
    let PlannedScenarios { scenarios, failures } = planned;
    let mut records = Vec::with_capacity(n_rollouts * scenarios.len());
    for scenario in &scenarios {
        records.extend(run_scenario(cfg, scenario, &sim, NoiseSwitches::ALL, n_rollouts, seed)?);
    }
    let plans = scenarios.iter().map(PlanReport::new).collect();
    let summary = summarize(cfg, plans, failures, &records, seed, n_rollouts);
    Ok(ExperimentOutput {
        summary,
        records,
        scenarios,
    })
}

/// Plans every configured sensitivity, collecting failures instead of
/// stopping at the first one.
pub fn plan_all(cfg: &HopperConfig, init: InitKind) -> Result<PlannedScenarios> {
    let init = initial_trajectory(cfg, init)?;
    let mut out = PlannedScenarios::default();
    for (index, &sigma) in cfg.experiment.sigmas.iter().enumerate() {
        let name = scenario_name(sigma);
        match plan_scenario(cfg, sigma, init.clone()) {
            Ok(plan) => out.scenarios.push(Scenario { name, index, plan }),
            Err(err) => out.failures.push(PlanFailure {
                scenario: name,
                sigma,
                error: err.to_string(),
            }),
        }
    }
    Ok(out)
}

const TRACE_HEADER: [&str; 24] = [
    "scenario", "sigma", "rollout", "seed", "t", "q_h", "q_f", "v_h", "v_f", "u", "y_q_h", "y_q_f", "y_v_h", "y_v_f",
    "force", "step_cost", "err_q_h", "err_q_f", "err_v_h", "err_v_f", "diverged", "aborted", "fallbacks", "cost",
];

/// Column layout of `traces.csv`, one row per rollout and knot `t = 0..=T`;
/// control, measurement and force columns are empty on the last row.
pub fn trace_columns() -> &'static [&'static str] {
    &TRACE_HEADER
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Writes `summary.json`, `traces.csv`, per-scenario `series_<name>.csv`
/// (mean and std bands) and `histogram_<name>.csv` into `dir`.
pub fn export(dir: &Path, cfg: &HopperConfig, summary: &ExperimentSummary, records: &[RolloutRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("summary.json"), summary.to_json()?)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;

    let mut w = csv::Writer::from_path(dir.join("traces.csv"))?;
    w.write_record(TRACE_HEADER)?;
    for r in records {
        for t in 0..r.states.len() {
            let x = &r.states[t];
            let e = &r.tracking_error[t];
            let mut row = vec![r.scenario.clone(), r.sigma.to_string(), r.index.to_string(), r.seed.to_string(), t.to_string()];
            row.extend(x.iter().map(|v| v.to_string()));
            row.push(opt(r.controls.get(t).map(|u| u[0])));
            match r.observations.get(t) {
                Some(y) => row.extend(y.iter().map(|v| v.to_string())),
                None => row.extend(std::iter::repeat_n(String::new(), STATE_DIM)),
            }
            row.push(opt(r.forces.get(t).copied()));
            row.push(opt(r.step_costs.get(t).copied()));
            row.extend(e.iter().map(|v| v.to_string()));
            row.push(r.diverged.to_string());
            row.push(r.aborted.to_string());
            row.push(r.fallbacks.to_string());
            row.push(r.cost.to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;

    let frame = cfg.model.contact.frame;
    for s in &summary.scenarios {
        let own: Vec<&RolloutRecord> = records
            .iter()
            .filter(|r| r.scenario == s.scenario && !r.aborted && !(summary.exclude_diverged && r.diverged))
            .collect();
        let len = own.iter().map(|r| r.states.len()).max().unwrap_or(0);
        let hip = time_stats(&own, len, |r, t| r.states.get(t).map(|x| x[QH]));
        let foot = time_stats(&own, len, |r, t| r.states.get(t).map(|x| frame.foot_height(x)));
        let force = time_stats(&own, len, |r, t| r.forces.get(t).copied());
        let mut w = csv::Writer::from_path(dir.join(format!("series_{}.csv", s.scenario)))?;
        w.write_record(["t", "hip_mean", "hip_std", "foot_mean", "foot_std", "force_mean", "force_std"])?;
        for t in 0..len {
            let mut row = vec![t.to_string()];
            for stat in [hip[t], foot[t], force[t]] {
                row.push(opt(stat.map(|s| s.0)));
                row.push(opt(stat.map(|s| s.1)));
            }
            w.write_record(&row)?;
        }
        w.flush()?;

        let costs: Vec<f64> = own.iter().map(|r| r.cost).filter(|c| c.is_finite()).collect();
        let mut w = csv::Writer::from_path(dir.join(format!("histogram_{}.csv", s.scenario)))?;
        w.write_record(["bin_low", "bin_high", "count"])?;
        for (lo, hi, count) in histogram(&costs, 20) {
            w.write_record([lo.to_string(), hi.to_string(), count.to_string()])?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Equal-width histogram over the data range.
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let (Some(lo), Some(hi)) = (
        values.iter().copied().reduce(f64::min),
        values.iter().copied().reduce(f64::max),
    ) else {
        return Vec::new();
    };
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in values {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + width * i as f64, lo + width * (i + 1) as f64, c))
        .collect()
}

fn parse_f64(field: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| Error::Config(format!("invalid number '{field}' in traces")))
}

fn required(field: &str) -> Result<f64> {
    parse_f64(field)?.ok_or_else(|| Error::Config("missing value in traces".into()))
}

/// Reads back the records written by [`export`].
pub fn import_records(dir: &Path) -> Result<Vec<RolloutRecord>> {
    let mut reader = csv::Reader::from_path(dir.join("traces.csv"))?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != TRACE_HEADER {
        return Err(Error::Config("unexpected traces.csv columns".into()));
    }
    let mut records: Vec<RolloutRecord> = Vec::new();
    for row in reader.records() {
        let row = row?;
        let field = |i: usize| row.get(i).unwrap_or("");
        let t: usize = field(4).parse().map_err(|_| Error::Config("invalid knot index".into()))?;
        if t == 0 {
            records.push(RolloutRecord {
                scenario: field(0).to_string(),
                sigma: required(field(1))?,
                index: field(2).parse().map_err(|_| Error::Config("invalid rollout index".into()))?,
                seed: field(3).parse().map_err(|_| Error::Config("invalid seed".into()))?,
                states: Vec::new(),
                controls: Vec::new(),
                observations: Vec::new(),
                forces: Vec::new(),
                step_costs: Vec::new(),
                cost: required(field(23))?,
                tracking_error: Vec::new(),
                diverged: field(20) == "true",
                aborted: field(21) == "true",
                fallbacks: field(22).parse().map_err(|_| Error::Config("invalid fallback count".into()))?,
            });
        }
        let r = records
            .last_mut()
            .ok_or_else(|| Error::Config("traces.csv does not start at t = 0".into()))?;
        let vec4 = |from: usize| -> Result<Vector> { Ok(Vector::from_vec((from..from + 4).map(|i| required(field(i))).collect::<Result<_>>()?)) };
        r.states.push(vec4(5)?);
        if let Some(u) = parse_f64(field(9))? {
            r.controls.push(Vector::from_element(1, u));
            r.observations.push(vec4(10)?);
        }
        if let Some(f) = parse_f64(field(14))? {
            r.forces.push(f);
        }
        if let Some(c) = parse_f64(field(15))? {
            r.step_costs.push(c);
        }
        r.tracking_error.push(vec4(16)?);
    }
    Ok(records)
}

/// Recomputes the summary from an exported directory.
pub fn import_summary(dir: &Path) -> Result<ExperimentSummary> {
    let stored: ExperimentSummary = serde_json::from_str(&fs::read_to_string(dir.join("summary.json"))?)?;
    let cfg = HopperConfig::load(&dir.join("config.toml"))?;
    let records = import_records(dir)?;
    Ok(summarize(&cfg, stored.plans, stored.plan_failures, &records, stored.seed, stored.rollouts))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_pass(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var.sqrt())
    }

    #[test]
    fn welford_matches_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for len in [2, 7, 100, 1000] {
            let xs: Vec<f64> = (0..len)
                .map(|_| { let z: f64 = StandardNormal.sample(&mut rng); 1e3 + 5.0 * z })
                .collect();
            let (m, s) = mean_std(xs.iter().copied()).unwrap();
            let (m2, s2) = two_pass(&xs);
            assert!((m - m2).abs() <= 1e-12 * m2.abs());
            assert!((s - s2).abs() <= 1e-12 * s2);
        }
    }

    #[test]
    fn degenerate_statistics() {
        assert_eq!(mean_std(std::iter::empty()), None);
        assert_eq!(mean_std([4.0]), Some((4.0, 0.0)));
    }

    #[test]
    fn empty_scenario_summary_has_no_statistics() {
        let s = summarize_scenario("ddp", 0.0, &[], false, |x| x[0]);
        assert_eq!(s.n, 0);
        assert_eq!(s.cost_mean, None);
        assert_eq!(s.hip_apex, None);
        assert_eq!(s.takeoff_force, None);
    }

    #[test]
    fn histogram_counts_everything() {
        let h = histogram(&[0.0, 0.5, 1.0, 1.0, 0.25], 4);
        assert_eq!(h.iter().map(|b| b.2).sum::<usize>(), 5);
        assert_eq!(h[3].2, 2);
        assert!(histogram(&[], 4).is_empty());
        assert_eq!(histogram(&[2.0, 2.0], 3)[0].2, 2);
    }

    #[test]
    fn streams_are_distinct() {
        assert_ne!(rollout_stream(0, 1), rollout_stream(1, 0));
        assert_ne!(rollout_stream(0, 1), rollout_stream(0, 2));
    }
}
