use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rsoc_core::backward::backward_pass;
use rsoc_core::baseline::{ilqg_backward, ilqg_solve};
use rsoc_core::config::{HopperConfig, InitKind};
use rsoc_core::harness::initial_trajectory;
use rsoc_core::linalg::{Mat, Vector};
use rsoc_core::model::{linearize, LinearModel, NoiseModel, QuadraticCost, Trajectory};
use rsoc_core::oracles::{batch_stress_oracle, lqr_gains};
use rsoc_core::planner::{solve, PlanOptions};
use rsoc_core::risk_cost::evaluate_risk_cost;
use rsoc_core::verify::{random_lq_problem, scalar_instance, LqDims};

fn rel(a: &Mat, b: &Mat) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

fn rel_vec(a: &Vector, b: &Vector) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

#[test]
fn backward_pass_matches_dense_elimination() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut compared = 0;
    for trial in 0..12 {
        let dims = LqDims::random(&mut rng, 4, 2, 2..=6);
        let problem = random_lq_problem(&mut rng, dims, 0.05, trial % 2 == 0);
        let lin = problem.linearization().unwrap();
        for sigma in [-0.4, 0.3, 2.0] {
            let Ok(recursion) = backward_pass(&lin, &problem.noise, sigma) else {
                continue;
            };
            let oracle = batch_stress_oracle(&lin, &problem.noise, sigma).unwrap();
            assert!(oracle.well_posed, "trial {trial}, sigma {sigma}");
            for t in 0..dims.horizon {
                assert!(rel_vec(&recursion.k[t], &oracle.k[t]) < 1e-8, "k, trial {trial}, t {t}");
                assert!(rel(&recursion.big_k[t], &oracle.big_k[t]) < 1e-8, "K, trial {trial}, t {t}");
            }
            for t in 0..=dims.horizon {
                assert!(rel(&recursion.big_v[t], &oracle.big_v[t]) < 1e-8, "V, trial {trial}, t {t}");
                assert!(rel_vec(&recursion.v[t], &oracle.v[t]) < 1e-8, "v, trial {trial}, t {t}");
                let scale = oracle.vbar[t].abs().max(1.0);
                assert!((recursion.vbar[t] - oracle.vbar[t]).abs() < 1e-8 * scale, "vbar, trial {trial}, t {t}");
            }
            compared += 1;
        }
    }
    assert!(compared >= 30, "only {compared} admissible comparisons");
}

#[test]
fn risk_neutral_gains_are_lqr_gains() {
    let a = Mat::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
    let b = Mat::from_row_slice(2, 1, &[0.005, 0.1]);
    let q = Mat::from_diagonal(&Vector::from_vec(vec![1.0, 0.1]));
    let r = Mat::from_element(1, 1, 0.01);
    let qt = Mat::from_diagonal(&Vector::from_vec(vec![10.0, 1.0]));
    let horizon = 30;
    let model = LinearModel::time_invariant(a.clone(), b.clone(), Mat::identity(2, 2), horizon);
    let cost = QuadraticCost::regulator(q.clone(), r.clone(), qt.clone(), horizon);
    let traj = Trajectory::rollout(&model, Vector::zeros(2), vec![Vector::zeros(1); horizon]).unwrap();
    let lin = linearize(&model, &cost, &traj).unwrap();
    let noise = NoiseModel::diagonal(&[1e-3, 1e-3], &[1e-3, 1e-3], &[1e-3, 1e-3], Vector::zeros(2)).unwrap();

    let reference = lqr_gains(&a, &b, &q, &r, &qt, horizon);
    let neutral = ilqg_backward(&lin).unwrap();
    let zero = backward_pass(&lin, &noise, 0.0).unwrap();
    for (t, gain) in reference.iter().enumerate() {
        assert!(rel(&neutral.big_k[t], gain) < 1e-10, "t {t}");
        assert!(rel(&zero.big_k[t], gain) < 1e-10, "t {t}");
        assert!(neutral.k[t].amax() < 1e-12);
    }
}

#[test]
fn start_value_curvature_decreases_with_sigma() {
    let problem = scalar_instance();
    let lin = problem.linearization().unwrap();
    let sigmas = [-5.0, -2.0, -0.5, -0.01, 0.0, 0.01, 0.5, 2.0, 10.0];
    let v0: Vec<f64> = sigmas
        .iter()
        .map(|&s| backward_pass(&lin, &problem.noise, s).unwrap().big_v[0][(0, 0)])
        .collect();
    for (w, s) in v0.windows(2).zip(sigmas.windows(2)) {
        assert!(w[0] > w[1], "V0 not decreasing between sigma {} and {}: {:?}", s[0], s[1], w);
    }
}

#[test]
fn risk_cost_is_ordered_by_sensitivity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let dims = LqDims::random(&mut rng, 3, 2, 3..=8);
        let problem = random_lq_problem(&mut rng, dims, 0.05, false);
        let lin = problem.linearization().unwrap();
        let costs: Vec<f64> = [-0.3, -0.1, 0.0, 0.1, 0.3]
            .iter()
            .map(|&s| evaluate_risk_cost(&lin, &problem.noise, s).unwrap().total)
            .collect();
        for w in costs.windows(2) {
            assert!(w[0] > w[1], "{costs:?}");
        }
    }
}

#[test]
fn tiny_sensitivity_on_the_hopper_matches_the_risk_neutral_pass() {
    let cfg = HopperConfig::default();
    let model = cfg.planning_model();
    let cost = cfg.cost();
    let traj = initial_trajectory(&cfg, InitKind::Rollout).unwrap();
    let lin = linearize(&model, &cost, &traj).unwrap();
    let noise = cfg.noise_model();
    let neutral = ilqg_backward(&lin).unwrap();
    for sigma in [-1e-8, 1e-8] {
        let risk = backward_pass(&lin, &noise, sigma).unwrap();
        for t in 0..traj.horizon() {
            assert!(rel(&risk.big_k[t], &neutral.big_k[t]) < 1e-6, "sigma {sigma}, t {t}");
            assert!(rel_vec(&risk.k[t], &neutral.k[t]) < 1e-6, "sigma {sigma}, t {t}");
        }
    }
    let at_zero = evaluate_risk_cost(&lin, &noise, 1e-10).unwrap().total;
    let near_zero = evaluate_risk_cost(&lin, &noise, 1e-8).unwrap().total;
    assert!((at_zero - near_zero).abs() < 1e-6 * at_zero.abs().max(1.0));
}

#[test]
fn zero_sensitivity_planner_reproduces_the_baseline_on_the_hopper() {
    let cfg = HopperConfig::default();
    let model = cfg.planning_model();
    let cost = cfg.cost();
    let noise = cfg.noise_model();
    let init = initial_trajectory(&cfg, InitKind::Rollout).unwrap();
    let opts = PlanOptions::default();
    let risk = solve(&model, &cost, &noise, 0.0, init.clone(), &opts).unwrap();
    let baseline = ilqg_solve(&model, &cost, &noise, init, &opts).unwrap();
    assert_eq!(risk.status, baseline.status);
    assert_eq!(risk.log.len(), baseline.log.len());
    assert!((risk.cost - baseline.cost).abs() < 1e-9 * baseline.cost.abs());
    for (a, b) in risk.trajectory.controls.iter().zip(&baseline.trajectory.controls) {
        assert!((a - b).amax() < 1e-6);
    }
}
