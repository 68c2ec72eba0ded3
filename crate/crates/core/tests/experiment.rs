use std::fs;

use rsoc_core::config::{HopperConfig, InitKind, TrueStart};
use rsoc_core::error::Error;
use rsoc_core::harness::{
    export, import_records, import_summary, initial_trajectory, plan_all, plan_scenario, run_experiment, run_scenario,
    scenario_name, NoiseSwitches, PlanFile, Plant, Scenario,
};
use rsoc_core::hopper::{simulator_rest_state, ContactFrame, DampingSign};

fn small_config() -> HopperConfig {
    let mut cfg = HopperConfig::default();
    cfg.experiment.sigmas = vec![0.0, 10.0];
    cfg.experiment.rollouts = 8;
    cfg
}

#[test]
fn export_round_trips_records_and_summary() {
    let cfg = small_config();
    let planned = plan_all(&cfg, InitKind::Rollout).unwrap();
    let out = run_experiment(&cfg, planned, 8, 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export(dir.path(), &cfg, &out.summary, &out.records).unwrap();
    for name in ["summary.json", "traces.csv", "config.toml", "series_ddp.csv", "histogram_sigma_10.csv"] {
        assert!(dir.path().join(name).is_file(), "{name} missing");
    }
    let records = import_records(dir.path()).unwrap();
    assert_eq!(records, out.records);
    let summary = import_summary(dir.path()).unwrap();
    assert_eq!(summary, out.summary);
}

#[test]
fn traces_with_foreign_columns_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("traces.csv"), "a,b\n1,2\n").unwrap();
    assert!(import_records(dir.path()).is_err());
}

#[test]
fn failed_plans_are_reported_and_the_rest_still_runs() {
    let mut cfg = small_config();
    cfg.experiment.sigmas = vec![0.0, -50.0, 10.0];
    let planned = plan_all(&cfg, InitKind::Rollout).unwrap();
    assert_eq!(planned.failures.len(), 1);
    assert_eq!(planned.failures[0].scenario, "sigma_-50");
    assert!(planned.failures[0].error.contains("breakdown"), "{}", planned.failures[0].error);
    let indices: Vec<usize> = planned.scenarios.iter().map(|s| s.index).collect();
    assert_eq!(indices, vec![0, 2]);

    let out = run_experiment(&cfg, planned, 4, 1).unwrap();
    assert_eq!(out.summary.plan_failures.len(), 1);
    assert!(out.summary.scenario("sigma_-50").is_none());
    assert_eq!(out.summary.scenario("ddp").unwrap().n, 4);
    assert_eq!(out.summary.scenario("sigma_10").unwrap().n, 4);
}

#[test]
fn a_scenario_keeps_its_noise_streams_when_others_fail() {
    let cfg = small_config();
    let planned = plan_all(&cfg, InitKind::Rollout).unwrap();
    let seeking = planned.scenarios[1].clone();
    let sim = cfg.simulator();
    let alone = run_scenario(&cfg, &seeking, &sim, NoiseSwitches::ALL, 4, 3).unwrap();
    let together = run_experiment(&cfg, planned, 4, 3).unwrap();
    let from_experiment: Vec<_> = together.records.into_iter().filter(|r| r.scenario == seeking.name).collect();
    assert_eq!(alone, from_experiment);
}

#[test]
fn rollouts_do_not_depend_on_the_thread_count() {
    let cfg = small_config();
    let planned = plan_all(&cfg, InitKind::Rollout).unwrap();
    let scenario = planned.scenarios[1].clone();
    let sim = cfg.simulator();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_scenario(&cfg, &scenario, &sim, NoiseSwitches::ALL, 16, 11).unwrap())
    };
    let serial = run(1);
    assert_eq!(serial, run(4));
    assert_eq!(serial, run(1));
}

#[test]
fn plan_files_round_trip_and_reject_other_versions() {
    let cfg = small_config();
    let init = initial_trajectory(&cfg, InitKind::Rollout).unwrap();
    let plan = plan_scenario(&cfg, 10.0, init).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("plan.json");
    let file = PlanFile::new(cfg.clone(), plan);
    file.save(&path).unwrap();
    assert_eq!(PlanFile::load(&path).unwrap(), file);

    let text = fs::read_to_string(&path).unwrap().replacen("\"version\": 1", "\"version\": 99", 1);
    fs::write(&path, text).unwrap();
    assert!(matches!(PlanFile::load(&path), Err(Error::PlanVersion(99))));
}

#[test]
fn configuration_round_trips_through_toml() {
    let mut cfg = HopperConfig::default();
    cfg.model.contact.frame = ContactFrame::Printed;
    cfg.model.contact.damping_sign = DampingSign::Printed;
    cfg.problem.true_start = TrueStart::Planned;
    cfg.experiment.sigmas = vec![0.0, -0.05];
    let text = cfg.to_toml();
    assert!(text.contains("damping_sign = \"printed\""), "{text}");
    assert!(text.contains("true_start = \"planned\""), "{text}");
    assert_eq!(HopperConfig::from_toml(&text).unwrap(), cfg);
}

fn noiseless_start(true_start: TrueStart) -> (rsoc_core::linalg::Vector, rsoc_core::linalg::Vector) {
    let mut cfg = small_config();
    cfg.problem.true_start = true_start;
    let init = initial_trajectory(&cfg, InitKind::Rollout).unwrap();
    let plan = plan_scenario(&cfg, 0.0, init).unwrap();
    let planned = plan.trajectory.states[0].clone();
    let scenario = Scenario {
        name: scenario_name(0.0),
        index: 0,
        plan,
    };
    let records = run_scenario(&cfg, &scenario, &cfg.simulator(), NoiseSwitches::NONE, 1, 0).unwrap();
    (records[0].states[0].clone(), planned)
}

#[test]
fn true_start_selects_the_initial_state_of_rollouts() {
    let cfg = small_config();
    let (rest, planned) = noiseless_start(TrueStart::PlantRest);
    assert_eq!(rest, simulator_rest_state(&cfg.model, &planned));
    assert_eq!(rest, cfg.simulator().rest_state(&planned));
    let (start, planned) = noiseless_start(TrueStart::Planned);
    assert_eq!(start, planned);
}
