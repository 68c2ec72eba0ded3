use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rsoc_core::baseline::{kf_step, ilqg_solve, KalmanBelief, KalmanController};
use rsoc_core::config::{HopperConfig, InitKind};
use rsoc_core::filter::{filter_step, min_stress_estimate, stationarity_residual, FilterFallback, StressBelief, StressController};
use rsoc_core::harness::{initial_trajectory, run_rollout, NoiseSwitches, PlanningPlant, RolloutSetup};
use rsoc_core::linalg::{is_spd, Mat, Vector};
use rsoc_core::model::linearize;
use rsoc_core::planner::{solve, PlanArtifacts};
use rsoc_core::verify::{random_lq_problem, LqDims, LqProblem};

fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> Vector {
    Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Mat {
    let g = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &g * g.transpose() / n as f64 + Mat::identity(n, n) * 0.1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn risk_neutral_filter_is_the_kalman_filter(seed in any::<u64>(), gaps in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = LqDims::random(&mut rng, 4, 2, 5..=30);
        let problem = random_lq_problem(&mut rng, dims, 0.1, gaps);
        let lin = problem.linearization().unwrap();
        let mut kf = KalmanBelief::initial(&problem.noise);
        let mut sf = StressBelief::initial(&problem.noise);
        for step in &lin.steps {
            let du = random_vector(&mut rng, dims.control);
            let dy = random_vector(&mut rng, dims.obs);
            kf = kf_step(&kf, &du, &dy, step, &problem.noise).unwrap();
            sf = filter_step(&sf, &du, &dy, step, &problem.noise, 0.0).unwrap();
            let scale = kf.mean.amax().max(kf.cov.amax()).max(1.0);
            prop_assert!((&kf.mean - &sf.mean).amax() <= 1e-10 * scale);
            prop_assert!((&kf.cov - &sf.curvature).amax() <= 1e-10 * scale);
            prop_assert!(is_spd(&sf.curvature));
            prop_assert_eq!(&sf.curvature, &sf.curvature.transpose());
        }
    }

    #[test]
    fn minimum_stress_estimate_is_stationary(seed in any::<u64>(), sigma in -0.5f64..10.0, n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let belief = StressBelief {
            mean: random_vector(&mut rng, n),
            curvature: random_spd(&mut rng, n),
            t: 0,
        };
        let big_v = random_spd(&mut rng, n);
        let v = random_vector(&mut rng, n);
        // Only well-posed combinations: P^{-1} + sigma V positive definite.
        let p_inv = belief.curvature.clone().try_inverse().unwrap();
        prop_assume!(is_spd(&(p_inv + &big_v * sigma)));
        let check = min_stress_estimate(&belief, &big_v, &v, sigma).unwrap();
        let residual = stationarity_residual(&belief, &big_v, &v, sigma, &check).unwrap();
        let scale = check.amax().max(belief.mean.amax()).max(1.0);
        prop_assert!(residual.amax() <= 1e-8 * scale, "residual {}", residual.amax());
    }

    #[test]
    fn stress_filter_keeps_curvature_positive_for_risk_seeking(seed in any::<u64>(), sigma in 0.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = LqDims::random(&mut rng, 4, 2, 5..=20);
        let problem = random_lq_problem(&mut rng, dims, 0.1, false);
        let lin = problem.linearization().unwrap();
        let mut sf = StressBelief::initial(&problem.noise);
        for step in &lin.steps {
            let du = random_vector(&mut rng, dims.control);
            let dy = random_vector(&mut rng, dims.obs);
            sf = filter_step(&sf, &du, &dy, step, &problem.noise, sigma).unwrap();
            prop_assert!(is_spd(&sf.curvature));
        }
    }
}

fn replay_error(cfg: &HopperConfig, plan: &PlanArtifacts) -> f64 {
    let model = cfg.planning_model();
    let cost = cfg.cost();
    let noise = cfg.noise_model();
    let lin = linearize(&model, &cost, &plan.trajectory).unwrap();
    let plant = PlanningPlant(&model);
    let setup = RolloutSetup {
        model: &model,
        plant: &plant,
        cost: &cost,
        noise: &noise,
        plan,
        initial_state: &plan.trajectory.states[0],
        switches: NoiseSwitches::NONE,
    };
    let rng = ChaCha8Rng::seed_from_u64(0);
    let body = if plan.sigma == 0.0 {
        let mut ctrl = KalmanController::new(&model, plan, &lin, &noise);
        run_rollout(&setup, &mut ctrl, rng)
    } else {
        let mut ctrl = StressController::new(&model, plan, &lin, &noise, FilterFallback::Abort);
        run_rollout(&setup, &mut ctrl, rng)
    };
    assert!(!body.aborted && !body.diverged);
    assert_eq!(body.states.len(), plan.horizon() + 1);
    body.tracking_error.iter().map(|e| e.amax()).fold(0.0, f64::max)
}

#[test]
fn noiseless_replay_on_the_planning_model_reproduces_the_risk_neutral_plan() {
    let cfg = HopperConfig::default();
    let model = cfg.planning_model();
    let cost = cfg.cost();
    let noise = cfg.noise_model();
    let init = initial_trajectory(&cfg, InitKind::Rollout).unwrap();
    let baseline = ilqg_solve(&model, &cost, &noise, init, &cfg.solver.options()).unwrap();
    assert!(replay_error(&cfg, &baseline) < 1e-9);
}

#[test]
fn noiseless_stress_replay_drifts_to_first_order_in_sigma() {
    let cfg = HopperConfig::default();
    let model = cfg.planning_model();
    let cost = cfg.cost();
    let noise = cfg.noise_model();
    let opts = cfg.solver.options();
    let drift = |sigma: f64| {
        let init = initial_trajectory(&cfg, InitKind::Rollout).unwrap();
        let plan = solve(&model, &cost, &noise, sigma, init, &opts).unwrap();
        replay_error(&cfg, &plan)
    };
    let (small, larger) = (drift(1e-6), drift(1e-4));
    assert!(small > 0.0 && small < 1e-5, "{small}");
    let ratio = larger / small;
    assert!((ratio / 100.0 - 1.0).abs() < 0.05, "drift ratio {ratio}");
    assert!(drift(10.0) < 0.1);
}

fn lq_replay(problem: &LqProblem, sigma: f64) -> (f64, f64) {
    let plan = problem.plan(sigma).unwrap();
    let lin = linearize(&problem.model, &problem.cost, &plan.trajectory).unwrap();
    let setup = RolloutSetup {
        model: &problem.model,
        plant: &problem.model,
        cost: &problem.cost,
        noise: &problem.noise,
        plan: &plan,
        initial_state: &plan.trajectory.states[0],
        switches: NoiseSwitches::NONE,
    };
    let rng = ChaCha8Rng::seed_from_u64(1);
    let body = if sigma == 0.0 {
        let mut ctrl = KalmanController::new(&problem.model, &plan, &lin, &problem.noise);
        run_rollout(&setup, &mut ctrl, rng)
    } else {
        let mut ctrl = StressController::new(&problem.model, &plan, &lin, &problem.noise, FilterFallback::Abort);
        run_rollout(&setup, &mut ctrl, rng)
    };
    assert_eq!(body.states.len(), plan.horizon() + 1);
    let state = body.tracking_error.iter().map(|e| e.amax()).fold(0.0, f64::max);
    let control = plan
        .trajectory
        .controls
        .iter()
        .zip(&body.controls)
        .map(|(a, b)| (a - b).amax())
        .fold(0.0, f64::max);
    (state, control)
}

#[test]
fn noiseless_replay_on_a_linear_plant() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..5 {
        let dims = LqDims::random(&mut rng, 4, 2, 5..=15);
        let problem = random_lq_problem(&mut rng, dims, 0.01, true);
        let (state, control) = lq_replay(&problem, 0.0);
        assert!(state < 1e-9 && control < 1e-9, "{state} {control}");
        let (small, _) = lq_replay(&problem, 1e-7);
        let (larger, _) = lq_replay(&problem, 1e-5);
        assert!(small < 1e-5, "{small}");
        assert!((larger / small / 100.0 - 1.0).abs() < 0.05, "{small} {larger}");
    }
}
