//! Executable acceptance checks, shared by the acceptance test target and the
//! `verify` command.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backward::backward_pass;
use crate::baseline::{ilqg_backward, ilqg_solve, kf_step, KalmanBelief};
use crate::config::HopperConfig;
use crate::error::{Error, Result};
use crate::filter::{filter_step, FilterFallback, StressBelief, StressController};
use crate::harness::{
    initial_trajectory, plan_all, run_experiment, run_rollout, scenario_name, ExperimentSummary, NoiseSwitches, Plant,
    RolloutSetup,
};
use crate::config::InitKind;
use crate::linalg::{is_spd, Mat, Vector};
use crate::model::{
    linearize, Covariance, CovarianceSchedule, LinearModel, Linearization, NoiseModel, QuadraticCost, Trajectory,
};
use crate::oracles::{batch_stress_oracle, gaussian_integral_check, mc_risk_cost, QuadraticForm};
use crate::planner::{forward_pass, solve, PlanArtifacts, PlanOptions, PlanStatus};
use crate::risk_cost::evaluate_risk_cost;

/// Outcome of one acceptance criterion.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub criterion: u8,
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub metric: f64,
    pub threshold: f64,
    pub elapsed: Duration,
    pub detail: String,
    pub parts: Vec<SubCheck>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubCheck {
    pub label: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn verdict(passed: bool) -> &'static str {
    if passed {
        "PASS"
    } else {
        "FAIL"
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {}: metric {:.3e} (threshold {:.3e}), {:.2} s",
            verdict(self.passed),
            self.criterion,
            self.name,
            self.metric,
            self.threshold,
            self.elapsed.as_secs_f64()
        )?;
        if !self.detail.is_empty() {
            write!(f, "; {}", self.detail)?;
        }
        for part in &self.parts {
            write!(f, "\n    {} ({}) {}", verdict(part.passed), part.label, part.detail)?;
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| scale * normal(rng))
}

fn random_vector(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vector {
    Vector::from_fn(len, |_, _| scale * normal(rng))
}

/// `scale (G G' / n + floor I)` with Gaussian `G`.
fn random_spd(rng: &mut ChaCha8Rng, n: usize, scale: f64, floor: f64) -> Mat {
    let g = random_matrix(rng, n, n, 1.0);
    (&g * g.transpose() / n as f64 + Mat::identity(n, n) * floor) * scale
}

fn covariance(m: Mat, name: &'static str) -> Covariance {
    Covariance::new(m, name).expect("generated covariance is positive definite")
}

/// Sizes of a random linear-quadratic problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LqDims {
    pub state: usize,
    pub control: usize,
    pub obs: usize,
    pub horizon: usize,
}

impl LqDims {
    pub fn random(rng: &mut ChaCha8Rng, max_state: usize, max_control: usize, horizon: std::ops::RangeInclusive<usize>) -> Self {
        let state = rng.random_range(1..=max_state);
        Self {
            state,
            control: rng.random_range(1..=max_control),
            obs: rng.random_range(1..=state),
            horizon: rng.random_range(horizon),
        }
    }
}

/// Linear time-varying dynamics with a quadratic cost and Gaussian noise,
/// plus a nominal trajectory around which it is expanded.
#[derive(Debug, Clone)]
pub struct LqProblem {
    pub model: LinearModel,
    pub cost: QuadraticCost,
    pub noise: NoiseModel,
    pub nominal: Trajectory,
}

impl LqProblem {
    pub fn linearization(&self) -> Result<Linearization> {
        linearize(&self.model, &self.cost, &self.nominal)
    }

    pub fn plan(&self, sigma: f64) -> Result<PlanArtifacts> {
        let opts = PlanOptions::default();
        if sigma == 0.0 {
            ilqg_solve(&self.model, &self.cost, &self.noise, self.nominal.clone(), &opts)
        } else {
            solve(&self.model, &self.cost, &self.noise, sigma, self.nominal.clone(), &opts)
        }
    }
}

/// Random LQ problem with covariances of size `noise_scale`. With `gaps` the
/// nominal states after the first are drawn independently of the dynamics.
pub fn random_lq_problem(rng: &mut ChaCha8Rng, dims: LqDims, noise_scale: f64, gaps: bool) -> LqProblem {
    let LqDims {
        state: n,
        control: m,
        obs: p,
        horizon,
    } = dims;
    let mut model = LinearModel {
        a: Vec::with_capacity(horizon),
        b: Vec::with_capacity(horizon),
        c: Vec::with_capacity(horizon),
        obs: Vec::with_capacity(horizon),
    };
    let mut cost = QuadraticCost::regulator(Mat::zeros(n, n), Mat::zeros(m, m), Mat::zeros(n, n), horizon);
    let mut process = Vec::with_capacity(horizon);
    let mut measurement = Vec::with_capacity(horizon);
    for t in 0..horizon {
        model.a.push(Mat::identity(n, n) * 0.9 + random_matrix(rng, n, n, 0.2 / (n as f64).sqrt()));
        model.b.push(random_matrix(rng, n, m, 0.5));
        model.c.push(random_vector(rng, n, 0.05));
        model.obs.push(random_matrix(rng, p, n, 1.0));
        // Joint weight over (x, u) so the cross term keeps the stage convex.
        let w = random_spd(rng, n + m, 1.0, 0.2);
        cost.q[t] = w.view((0, 0), (n, n)).clone_owned();
        cost.r[t] = w.view((n, n), (m, m)).clone_owned();
        cost.s[t] = w.view((n, 0), (m, n)).clone_owned();
        cost.qv[t] = random_vector(rng, n, 0.3);
        cost.rv[t] = random_vector(rng, m, 0.3);
        cost.c[t] = rng.random_range(0.0..1.0);
        process.push(covariance(random_spd(rng, n, noise_scale, 0.2), "process"));
        measurement.push(covariance(random_spd(rng, p, noise_scale, 0.2), "measurement"));
    }
    cost.q_terminal = random_spd(rng, n, 1.0, 0.2);
    cost.qv_terminal = random_vector(rng, n, 0.3);
    let x0 = random_vector(rng, n, 1.0);
    let noise = NoiseModel::new(
        CovarianceSchedule::per_step(process),
        CovarianceSchedule::per_step(measurement),
        covariance(random_spd(rng, n, noise_scale, 0.2), "initial"),
        x0.clone(),
    )
    .expect("dimensions agree");
    let controls: Vec<Vector> = (0..horizon).map(|_| random_vector(rng, m, 0.5)).collect();
    let nominal = if gaps {
        let mut states = vec![x0];
        states.extend((0..horizon).map(|_| random_vector(rng, n, 1.0)));
        Trajectory::from_knots(&model, states, controls)
    } else {
        Trajectory::rollout(&model, x0, controls)
    }
    .expect("dimensions agree");
    LqProblem {
        model,
        cost,
        noise,
        nominal,
    }
}

/// `x' = x + u`, `l = 1/2 x^2 + 1/2 u^2`, `T = 2`, all variances `0.1`, `x_hat_0 = 1`.
pub fn scalar_instance() -> LqProblem {
    let one = Mat::identity(1, 1);
    let model = LinearModel::time_invariant(one.clone(), one.clone(), one.clone(), 2);
    let cost = QuadraticCost::regulator(one.clone(), one.clone(), one, 2);
    let noise = NoiseModel::diagonal(&[0.1], &[0.1], &[0.1], Vector::from_element(1, 1.0)).expect("positive variances");
    let nominal =
        Trajectory::rollout(&model, noise.initial_mean.clone(), vec![Vector::zeros(1); 2]).expect("dimensions agree");
    LqProblem {
        model,
        cost,
        noise,
        nominal,
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Largest entrywise `|a - b| / |b|`, with entries below `1e-9` of the
/// largest reference entry compared on that scale instead.
fn max_relative_error<'a>(pairs: impl IntoIterator<Item = (&'a Mat, &'a Mat)>) -> f64 {
    let pairs: Vec<_> = pairs.into_iter().collect();
    let scale = pairs.iter().map(|(_, b)| b.amax()).fold(0.0, f64::max);
    let floor = (1e-9 * scale).max(f64::MIN_POSITIVE);
    pairs
        .iter()
        .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs() / y.abs().max(floor)))
        .fold(0.0, f64::max)
}

fn vector_as_mat(v: &Vector) -> Mat {
    Mat::from_column_slice(v.len(), 1, v.as_slice())
}

fn timed(
    criterion: u8,
    name: &'static str,
    threshold: f64,
    time_limit: Option<Duration>,
    body: impl FnOnce() -> Result<(f64, bool, String)>,
) -> CheckReport {
    let start = Instant::now();
    let outcome = body();
    let elapsed = start.elapsed();
    let (metric, ok, mut detail) = match outcome {
        Ok(v) => v,
        Err(e) => (f64::NAN, false, format!("error: {e}")),
    };
    let in_time = time_limit.is_none_or(|limit| elapsed < limit);
    if !in_time {
        detail = format!("{detail} exceeded the {:.0} s budget", time_limit.unwrap_or_default().as_secs_f64());
    }
    CheckReport {
        criterion,
        name,
        passed: ok && metric <= threshold && in_time,
        metric,
        threshold,
        elapsed,
        detail,
        parts: Vec::new(),
    }
}

/// Risk-sensitive gains at `sigma = +-1e-8` against the risk-neutral
/// recursion on 20 random problems.
pub fn check_sigma_continuity(seed: u64) -> CheckReport {
    timed(1, "sigma -> 0 gains match iLQG", 1e-5, Some(Duration::from_secs(10)), || {
        let mut worst = 0.0f64;
        for i in 0..20 {
            let mut rng = stream_rng(seed, i);
            let dims = LqDims::random(&mut rng, 4, 2, 2..=20);
            let problem = random_lq_problem(&mut rng, dims, 0.1, i % 2 == 1);
            let lin = problem.linearization()?;
            let reference = ilqg_backward(&lin)?;
            for sigma in [1e-8, -1e-8] {
                let risk = backward_pass(&lin, &problem.noise, sigma)?;
                let k_pairs: Vec<(Mat, Mat)> = risk
                    .k
                    .iter()
                    .zip(&reference.k)
                    .map(|(a, b)| (vector_as_mat(a), vector_as_mat(b)))
                    .collect();
                worst = worst.max(max_relative_error(k_pairs.iter().map(|(a, b)| (a, b))));
                worst = worst.max(max_relative_error(risk.big_k.iter().zip(&reference.big_k)));
            }
        }
        Ok((worst, true, "20 problems, n <= 4, m <= 2, T <= 20".into()))
    })
}

/// Closed-form risk cost against Monte-Carlo sampling on 5 random LQ problems.
///
/// The noise is small enough that `sigma sd(L)` stays of order one at
/// `sigma = 10`; beyond that the sample average of `exp(-sigma L)` is carried
/// by tail events a sample of 1e5 does not contain.
pub fn check_exact_risk_cost(seed: u64) -> CheckReport {
    timed(2, "risk cost exact on LQ", 3.0, Some(Duration::from_secs(60)), || {
        let mut worst = 0.0f64;
        let mut separation = f64::INFINITY;
        let mut failures = Vec::new();
        for i in 0..5 {
            let mut rng = stream_rng(seed, 100 + i);
            let dims = LqDims::random(&mut rng, 3, 2, 2..=8);
            let problem = random_lq_problem(&mut rng, dims, 1e-4, false);
            let lin = problem.linearization()?;
            let neutral = evaluate_risk_cost(&lin, &problem.noise, 0.0)?.total;
            for sigma in [-0.5, 1.0, 10.0] {
                let exact = evaluate_risk_cost(&lin, &problem.noise, sigma)?.total;
                let mc = mc_risk_cost(
                    &problem.model,
                    &problem.cost,
                    &problem.noise,
                    &problem.nominal.controls,
                    sigma,
                    100_000,
                    seed ^ (i << 8) ^ sigma.to_bits(),
                );
                let z = (exact - mc.estimate).abs() / mc.std_error;
                worst = worst.max(z);
                separation = separation.min((exact - neutral).abs() / mc.std_error);
                if z > 3.0 {
                    failures.push(format!(
                        "instance {i} sigma {sigma}: {exact:.6} vs {:.6} +- {:.1e}",
                        mc.estimate, mc.std_error
                    ));
                }
            }
        }
        let detail = if failures.is_empty() {
            format!(
                "standard errors, 5 instances x sigma in {{-0.5, 1, 10}}, 1e5 samples; \
                 risk terms are at least {separation:.1} standard errors from the risk-neutral cost"
            )
        } else {
            failures.join("; ")
        };
        Ok((worst, true, detail))
    })
}

/// The stress filter at `sigma = 0` against the Kalman filter.
pub fn check_filter_equivalence(seed: u64) -> CheckReport {
    timed(3, "sigma = 0 filter equals Kalman", 1e-10, None, || {
        let mut worst = 0.0f64;
        let mut all_pd = true;
        for i in 0..10 {
            let mut rng = stream_rng(seed, 200 + i);
            let mut dims = LqDims::random(&mut rng, 4, 2, 50..=50);
            dims.obs = rng.random_range(1..=4);
            let problem = random_lq_problem(&mut rng, dims, 0.1, i % 2 == 1);
            let lin = problem.linearization()?;
            let mut kf = KalmanBelief::initial(&problem.noise);
            let mut sf = StressBelief::initial(&problem.noise);
            for step in &lin.steps {
                let du = random_vector(&mut rng, dims.control, 0.3);
                let dy = random_vector(&mut rng, dims.obs, 0.3);
                kf = kf_step(&kf, &du, &dy, step, &problem.noise)?;
                sf = filter_step(&sf, &du, &dy, step, &problem.noise, 0.0)?;
                let scale = kf.mean.amax().max(kf.cov.amax()).max(1.0);
                let diff = (&kf.mean - &sf.mean).amax().max((&kf.cov - &sf.curvature).amax());
                worst = worst.max(diff / scale);
                all_pd &= is_spd(&sf.curvature) && sf.curvature == sf.curvature.transpose();
            }
        }
        let detail = if all_pd {
            "10 runs x 50 steps; P symmetric positive definite throughout"
        } else {
            "P lost symmetry or definiteness"
        };
        Ok((worst, all_pd, detail.into()))
    })
}

struct ResidualRun {
    max_residual: f64,
    aborted: usize,
    runs: usize,
}

fn residual_rollouts(
    setup: &RolloutSetup<'_>,
    lin: &Linearization,
    seed: u64,
    stream: u64,
    runs: usize,
    out: &mut ResidualRun,
) {
    for r in 0..runs {
        let mut ctrl = StressController::new(setup.model, setup.plan, lin, setup.noise, FilterFallback::Abort);
        ctrl.track_residual = true;
        let body = run_rollout(setup, &mut ctrl, stream_rng(seed, stream + r as u64));
        out.max_residual = out.max_residual.max(ctrl.max_residual);
        out.aborted += usize::from(body.aborted);
        out.runs += 1;
    }
}

/// Stationarity of the minimum-stress estimate along closed-loop runs on LQ
/// problems and on the hopper.
pub fn check_stationarity(cfg: &HopperConfig, seed: u64) -> CheckReport {
    timed(4, "minimum-stress stationarity", 1e-8, None, || {
        let mut acc = ResidualRun {
            max_residual: 0.0,
            aborted: 0,
            runs: 0,
        };
        for i in 0..5u64 {
            let mut rng = stream_rng(seed, 300 + i);
            let dims = LqDims::random(&mut rng, 4, 2, 5..=20);
            let problem = random_lq_problem(&mut rng, dims, 0.01, false);
            for (j, sigma) in [-0.5, 1.0, 10.0].into_iter().enumerate() {
                let plan = problem.plan(sigma)?;
                let lin = linearize(&problem.model, &problem.cost, &plan.trajectory)?;
                let setup = RolloutSetup {
                    model: &problem.model,
                    plant: &problem.model,
                    cost: &problem.cost,
                    noise: &problem.noise,
                    plan: &plan,
                    initial_state: &problem.noise.initial_mean,
                    switches: NoiseSwitches::ALL,
                };
                residual_rollouts(&setup, &lin, seed, (i * 3 + j as u64) << 16, 5, &mut acc);
            }
        }
        let model = cfg.planning_model();
        let cost = cfg.cost();
        let noise = cfg.noise_model();
        let sim = cfg.simulator();
        let plan = solve(&model, &cost, &noise, 10.0, initial_trajectory(cfg, InitKind::Rollout)?, &cfg.solver.options())?;
        let lin = linearize(&model, &cost, &plan.trajectory)?;
        let start = sim.rest_state(&plan.trajectory.states[0]);
        let setup = RolloutSetup {
            model: &model,
            plant: &sim,
            cost: &cost,
            noise: &noise,
            plan: &plan,
            initial_state: &start,
            switches: NoiseSwitches::ALL,
        };
        residual_rollouts(&setup, &lin, seed, 1 << 40, 10, &mut acc);
        Ok((
            acc.max_residual,
            acc.aborted == 0,
            format!("{} closed-loop runs (LQ and hopper), {} aborted", acc.runs, acc.aborted),
        ))
    })
}

/// Largest deviation of `|gap'_t|` from `(1 - alpha)|gap_t|`, relative to the
/// state magnitude, and whether `alpha = 1` closed every gap exactly.
fn gap_scaling_error(
    model: &dyn crate::model::SystemModel,
    traj: &Trajectory,
    k: &[Vector],
    big_k: &[Mat],
    alphas: &[f64],
) -> Result<(f64, bool)> {
    let mut worst = 0.0f64;
    let mut closed = true;
    for &alpha in alphas {
        let cand = forward_pass(model, traj, k, big_k, alpha)?;
        for t in 0..traj.horizon() {
            let scale = cand.states[t + 1].amax().max(1.0);
            let err = (cand.gaps[t].norm() - (1.0 - alpha) * traj.gaps[t].norm()).abs();
            worst = worst.max(err / scale);
            if alpha == 1.0 {
                closed &= cand.gaps[t].iter().all(|g| *g == 0.0);
            }
        }
    }
    Ok((worst, closed))
}

/// Gap contraction of the forward pass and of accepted planner steps.
pub fn check_gap_mechanics(cfg: &HopperConfig, seed: u64) -> CheckReport {
    let threshold = 64.0 * f64::EPSILON;
    timed(5, "gaps contract by (1 - alpha)", threshold, None, || {
        let alphas = cfg.solver.options().alphas;
        let model = cfg.planning_model();
        let cost = cfg.cost();
        let noise = cfg.noise_model();
        let init = initial_trajectory(cfg, InitKind::Interpolate)?;
        let lin = linearize(&model, &cost, &init)?;
        let gains = backward_pass(&lin, &noise, 10.0)?;
        let (mut worst, mut closed) = gap_scaling_error(&model, &init, &gains.k, &gains.big_k, &alphas)?;

        for i in 0..5 {
            let mut rng = stream_rng(seed, 400 + i);
            let dims = LqDims::random(&mut rng, 4, 2, 2..=20);
            let problem = random_lq_problem(&mut rng, dims, 0.1, true);
            let lin = problem.linearization()?;
            let gains = backward_pass(&lin, &problem.noise, 1.0)?;
            let (w, c) = gap_scaling_error(&problem.model, &problem.nominal, &gains.k, &gains.big_k, &alphas)?;
            worst = worst.max(w);
            closed &= c;
        }

        // Accepted planner steps, read from the iteration log.
        let opts = PlanOptions {
            max_iters: 20,
            ..cfg.solver.options()
        };
        let plan = solve(&model, &cost, &noise, 10.0, init, &opts)?;
        let mut steps = 0;
        for pair in plan.log.windows(2) {
            let expected = (1.0 - pair[1].alpha) * pair[0].max_gap;
            worst = worst.max((pair[1].max_gap - expected).abs() / plan.trajectory.states.iter().map(|x| x.amax()).fold(1.0, f64::max));
            steps += 1;
        }
        let detail = format!(
            "hopper and 5 LQ forward passes over {} step lengths, {steps} accepted planner steps; alpha = 1 {}",
            alphas.len(),
            if closed { "zeroes all gaps" } else { "left non-zero gaps" }
        );
        Ok((worst, closed, detail))
    })
}

/// Random positive definite form over `x` of dimension 1 or 2 and `y` of
/// dimension 0 to 2.
pub fn random_quadratic_form(rng: &mut ChaCha8Rng, x_dim: usize) -> (QuadraticForm, Vector) {
    let y_dim = rng.random_range(0..=2);
    let qyy = random_matrix(rng, y_dim, y_dim, 1.0);
    let curvature = rng.random_range(0.2..5.0);
    let form = QuadraticForm {
        qbar: normal(rng),
        qx: random_vector(rng, x_dim, 1.0),
        qy: random_vector(rng, y_dim, 1.0),
        qxx: random_spd(rng, x_dim, curvature, 0.1),
        qxy: random_matrix(rng, x_dim, y_dim, 0.5),
        qyy: (&qyy + qyy.transpose()) * 0.5,
    };
    let y = random_vector(rng, y_dim, 1.0);
    (form, y)
}

/// Closed-form Gaussian integral against quadrature on 100 random forms.
pub fn check_gaussian_integral(seed: u64) -> CheckReport {
    timed(6, "Gaussian integral identity", 1e-6, Some(Duration::from_secs(30)), || {
        let mut worst = 0.0f64;
        for i in 0..100 {
            let mut rng = stream_rng(seed, 500 + i);
            let (form, y) = random_quadratic_form(&mut rng, 1 + (i as usize % 2));
            worst = worst.max(gaussian_integral_check(&form, &y)?.relative_error());
        }
        Ok((worst, true, "relative error, 50 one- and 50 two-dimensional forms".into()))
    })
}

/// Admissible and inadmissible sensitivities on the scalar instance, with
/// the determinant sign confirmed by the batch oracle.
pub fn check_neurotic_breakdown() -> CheckReport {
    let mut report = timed(7, "neurotic breakdown", 0.0, None, || {
        let problem = scalar_instance();
        let lin = problem.linearization()?;
        let mut parts = Vec::new();

        let accepted = problem.plan(-0.5);
        let admissible = batch_stress_oracle(&lin, &problem.noise, -0.5)?;
        let ok_dets = admissible.well_posed && admissible.successor_dets.iter().all(|d| *d > 0.0);
        parts.push(format!(
            "sigma = -0.5 {}; oracle dets {:?}",
            match &accepted {
                Ok(p) => format!("planned ({:?})", p.status),
                Err(e) => format!("rejected: {e}"),
            },
            admissible.successor_dets
        ));

        let planned = problem.plan(-100.0);
        let raised = matches!(planned, Err(Error::NeuroticBreakdown { .. }));
        let oracle = batch_stress_oracle(&lin, &problem.noise, -100.0)?;
        let (backward_ok, det_gap) = match backward_pass(&lin, &problem.noise, -100.0) {
            Err(Error::NeuroticBreakdown { step, det }) => {
                let reference = oracle.successor_dets[step];
                let flipped = reference <= 0.0 && oracle.successor_dets[step + 1..].iter().all(|d| *d > 0.0);
                parts.push(format!("sigma = -100 backward pass breaks at step {step} with det {det:.6}, oracle {reference:.6}"));
                (flipped, (det - reference).abs() / reference.abs().max(1.0))
            }
            other => {
                parts.push(format!("sigma = -100 backward pass did not break down: {:?}", other.map(|_| ())));
                (false, f64::INFINITY)
            }
        };
        parts.push(format!(
            "sigma = -100 planner {}",
            if raised { "raised NeuroticBreakdown" } else { "did not raise NeuroticBreakdown" }
        ));
        let ok = accepted.is_ok() && ok_dets && raised && backward_ok && det_gap < 1e-9;
        Ok((if ok { 0.0 } else { 1.0 }, ok, parts.join("; ")))
    });
    report.threshold = 0.0;
    report
}

fn apex(summary: &ExperimentSummary, name: &str) -> Option<f64> {
    summary.plan(name).map(|p| p.hip_apex)
}

/// The three-scenario hopper experiment at desk scale.
pub fn check_hopper_experiment(cfg: &HopperConfig) -> (CheckReport, Option<ExperimentSummary>) {
    let start = Instant::now();
    let mut cfg = cfg.clone();
    cfg.experiment.sigmas = vec![0.0, -0.5, 10.0];
    let outcome = plan_all(&cfg, cfg.problem.init)
        .and_then(|planned| run_experiment(&cfg, planned, cfg.experiment.rollouts, cfg.experiment.seed));
    let summary = match outcome {
        Ok(out) => out.summary,
        Err(e) => {
            let report = CheckReport {
                criterion: 8,
                name: "hopper experiment",
                passed: false,
                metric: f64::NAN,
                threshold: 0.6,
                elapsed: start.elapsed(),
                detail: format!("error: {e}"),
                parts: Vec::new(),
            };
            return (report, None);
        }
    };
    let (ddp, averse, seeking) = (scenario_name(0.0), scenario_name(-0.5), scenario_name(10.0));
    let missing = |name: &str| {
        summary
            .plan_failures
            .iter()
            .find(|f| f.scenario == name)
            .map_or_else(|| format!("{name} has no result"), |f| format!("{name} plan failed: {}", f.error))
    };
    let mut parts = Vec::new();

    let a = match (apex(&summary, &averse), apex(&summary, &ddp)) {
        (Some(hi), Some(lo)) => SubCheck {
            label: "a",
            passed: hi > lo,
            detail: format!("plan apex sigma = -0.5 {hi:.4} vs sigma = 0 {lo:.4}"),
        },
        (None, _) => SubCheck { label: "a", passed: false, detail: missing(&averse) },
        (_, None) => SubCheck { label: "a", passed: false, detail: missing(&ddp) },
    };
    parts.push(a);

    let cost = |name: &str| summary.scenario(name).and_then(|s| s.cost_mean.zip(s.cost_std));
    let mut ratio = f64::NAN;
    let b = match (cost(&averse), cost(&ddp)) {
        (Some((_, sa)), Some((_, s0))) => {
            ratio = sa / s0;
            SubCheck {
                label: "b",
                passed: sa < s0 && ratio < 0.6,
                detail: format!("cost std sigma = -0.5 {sa:.4} vs sigma = 0 {s0:.4}, ratio {ratio:.3} (needs < 0.6)"),
            }
        }
        (None, _) => SubCheck { label: "b", passed: false, detail: missing(&averse) },
        (_, None) => SubCheck { label: "b", passed: false, detail: missing(&ddp) },
    };
    parts.push(b);

    let c = match (cost(&seeking), cost(&ddp)) {
        (Some((m10, _)), Some((m0, _))) => SubCheck {
            label: "c",
            passed: m10 > m0,
            detail: format!("mean cost sigma = 10 {m10:.4} vs sigma = 0 {m0:.4}"),
        },
        (None, _) => SubCheck { label: "c", passed: false, detail: missing(&seeking) },
        (_, None) => SubCheck { label: "c", passed: false, detail: missing(&ddp) },
    };
    parts.push(c);

    let mut conv_detail = Vec::new();
    let mut converged = true;
    for name in [&ddp, &averse, &seeking] {
        match summary.plan(name) {
            Some(p) => {
                let ok = matches!(p.status, PlanStatus::Converged | PlanStatus::LineSearchStalled)
                    && p.iterations <= cfg.solver.max_iters;
                converged &= ok;
                conv_detail.push(format!("{name} {:?} after {}", p.status, p.iterations));
            }
            None => {
                converged = false;
                conv_detail.push(missing(name));
            }
        }
    }
    parts.push(SubCheck {
        label: "convergence",
        passed: converged,
        detail: conv_detail.join(", "),
    });

    let passed = parts.iter().all(|p| p.passed);
    let report = CheckReport {
        criterion: 8,
        name: "hopper experiment",
        passed,
        metric: ratio,
        threshold: 0.6,
        elapsed: start.elapsed(),
        detail: format!("{} rollouts per scenario, seed {}", cfg.experiment.rollouts, cfg.experiment.seed),
        parts,
    };
    (report, Some(summary))
}

/// Summary bytes of repeated experiments on one thread and on several.
pub fn check_determinism(cfg: &HopperConfig) -> CheckReport {
    timed(9, "deterministic experiment", 0.0, None, || {
        let run = |threads: usize| -> Result<String> {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            pool.install(|| {
                let planned = plan_all(cfg, cfg.problem.init)?;
                run_experiment(cfg, planned, cfg.experiment.rollouts, cfg.experiment.seed)?.summary.to_json()
            })
        };
        let serial = run(1)?;
        let runs = [run(1)?, run(4)?, run(4)?];
        let differing = runs.iter().filter(|r| **r != serial).count();
        Ok((
            differing as f64,
            true,
            format!("{} summary bytes; runs on 1, 1, 4 and 4 threads", serial.len()),
        ))
    })
}

/// Every criterion in order.
pub fn run_all(cfg: &HopperConfig, seed: u64) -> Vec<CheckReport> {
    vec![
        check_sigma_continuity(seed),
        check_exact_risk_cost(seed),
        check_filter_equivalence(seed),
        check_stationarity(cfg, seed),
        check_gap_mechanics(cfg, seed),
        check_gaussian_integral(seed),
        check_neurotic_breakdown(),
        check_hopper_experiment(cfg).0,
        check_determinism(cfg),
    ]
}
