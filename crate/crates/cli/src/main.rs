//! `rsoc`: plan, simulate and compare risk-sensitive controllers on the hopper.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use rsoc_core::config::{HopperConfig, InitKind};
use rsoc_core::harness::{
    export, import_summary, initial_trajectory, plan_all, plan_scenario, run_experiment, run_scenario, scenario_name,
    summarize, ExperimentSummary, NoiseSwitches, PlanFile, PlanReport, Scenario,
};
use rsoc_core::verify::run_all;

#[derive(Parser)]
#[command(name = "rsoc", version, about = "Risk-sensitive iLQG with imperfect observations")]
struct Cli {
    /// Worker threads for rollouts (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute a plan for one sensitivity and write it as a plan file.
    Plan(PlanArgs),
    /// Run closed-loop rollouts of a stored plan on the stiff simulator.
    Rollout(RolloutArgs),
    /// Plan every configured sensitivity, simulate and export the results.
    Experiment(ExperimentArgs),
    /// Print the summary of an exported experiment.
    Report(ReportArgs),
    /// Run the acceptance checks and print a pass/fail table.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// TOML configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<HopperConfig> {
        match &self.config {
            Some(path) => HopperConfig::load(path).with_context(|| format!("reading {}", path.display())),
            None => Ok(HopperConfig::default()),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Rollout,
    Interpolate,
    File,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Risk sensitivity; 0 selects the risk-neutral baseline.
    #[arg(long, allow_hyphen_values = true)]
    sigma: f64,
    /// Output plan file.
    #[arg(long, default_value = "plan.json")]
    out: PathBuf,
    /// Iteration limit of the solver.
    #[arg(long)]
    max_iters: Option<usize>,
    /// Convergence threshold on the change of the merit.
    #[arg(long)]
    tol: Option<f64>,
    /// Initial guess of the solver.
    #[arg(long, value_enum, default_value = "rollout")]
    init: InitArg,
    /// Plan file whose trajectory seeds the solver when `--init file`.
    #[arg(long, required_if_eq("init", "file"))]
    init_file: Option<PathBuf>,
}

#[derive(Args)]
struct RolloutArgs {
    /// Plan file written by `plan`.
    #[arg(long)]
    plan: PathBuf,
    /// Number of rollouts per scenario.
    #[arg(long)]
    rollouts: Option<usize>,
    /// Master seed of the noise streams.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "RSOC_OUT_DIR", default_value = "rsoc-out")]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Number of rollouts per scenario.
    #[arg(long)]
    rollouts: Option<usize>,
    /// Master seed of the noise streams.
    #[arg(long)]
    seed: Option<u64>,
    /// Sensitivities to compare, overriding the configuration.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    sigma: Option<Vec<f64>>,
    /// Output directory.
    #[arg(long, env = "RSOC_OUT_DIR", default_value = "rsoc-out")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory written by `experiment` or `rollout`.
    #[arg(long, env = "RSOC_OUT_DIR", default_value = "rsoc-out")]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Seed of the randomized instances.
    #[arg(long, default_value_t = 2024)]
    seed: u64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn print_summary(summary: &ExperimentSummary) {
    println!("seed {}, {} rollouts per scenario", summary.seed, summary.rollouts);
    println!(
        "{:<14} {:>8} {:<20} {:>5} {:>12} {:>10} {:>10}",
        "plan", "sigma", "status", "iters", "cost", "hip apex", "max |k|"
    );
    for p in &summary.plans {
        println!(
            "{:<14} {:>8} {:<20} {:>5} {:>12.4} {:>10.4} {:>10.2e}",
            p.scenario,
            p.sigma,
            format!("{:?}", p.status),
            p.iterations,
            p.cost,
            p.hip_apex,
            p.max_feedforward_norm
        );
    }
    for f in &summary.plan_failures {
        println!("{:<14} {:>8} failed: {}", f.scenario, f.sigma, f.error);
    }
    println!();
    println!(
        "{:<14} {:>5} {:>5} {:>5} {:>12} {:>12} {:>10} {:>10} {:>10}",
        "rollouts", "n", "div", "abort", "L mean", "L std", "takeoff F", "landing F", "hip apex"
    );
    for s in &summary.scenarios {
        println!(
            "{:<14} {:>5} {:>5} {:>5} {:>12} {:>12} {:>10} {:>10} {:>10}",
            s.scenario,
            s.n,
            s.diverged,
            s.aborted,
            fmt_opt(s.cost_mean),
            fmt_opt(s.cost_std),
            fmt_opt(s.takeoff_force),
            fmt_opt(s.landing_force),
            fmt_opt(s.hip_apex)
        );
    }
}

fn plan(args: PlanArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(n) = args.max_iters {
        cfg.solver.max_iters = n;
    }
    if let Some(tol) = args.tol {
        cfg.solver.tol = tol;
    }
    cfg.validate()?;
    let init = match args.init {
        InitArg::Rollout => initial_trajectory(&cfg, InitKind::Rollout)?,
        InitArg::Interpolate => initial_trajectory(&cfg, InitKind::Interpolate)?,
        InitArg::File => {
            let path = args.init_file.as_deref().context("--init file needs --init-file")?;
            PlanFile::load(path)?.plan.trajectory
        }
    };
    let artifacts = plan_scenario(&cfg, args.sigma, init)?;
    let report = PlanReport::new(&Scenario {
        name: scenario_name(args.sigma),
        index: 0,
        plan: artifacts.clone(),
    });
    PlanFile::new(cfg, artifacts).save(&args.out)?;
    println!(
        "{}: {:?} after {} iterations, cost {:.6}, hip apex {:.4}, max |k| {:.2e}",
        report.scenario, report.status, report.iterations, report.cost, report.hip_apex, report.max_feedforward_norm
    );
    if !report.feedforward_negligible {
        println!("note: the stress controller drops a feedforward term of norm {:.2e}", report.max_feedforward_norm);
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn rollout(args: RolloutArgs) -> Result<()> {
    let file = PlanFile::load(&args.plan).with_context(|| format!("reading {}", args.plan.display()))?;
    let cfg = file.config;
    let n = args.rollouts.unwrap_or(cfg.experiment.rollouts);
    let seed = args.seed.unwrap_or(cfg.experiment.seed);
    let scenario = Scenario {
        name: scenario_name(file.plan.sigma),
        index: 0,
        plan: file.plan,
    };
    let records = run_scenario(&cfg, &scenario, &cfg.simulator(), NoiseSwitches::ALL, n, seed)?;
    let summary = summarize(&cfg, vec![PlanReport::new(&scenario)], Vec::new(), &records, seed, n);
    export(&args.out, &cfg, &summary, &records)?;
    print_summary(&summary);
    println!("\nwrote {}", args.out.display());
    Ok(())
}

fn experiment(args: ExperimentArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(sigmas) = args.sigma {
        cfg.experiment.sigmas = sigmas;
    }
    let n = args.rollouts.unwrap_or(cfg.experiment.rollouts);
    let seed = args.seed.unwrap_or(cfg.experiment.seed);
    let planned = plan_all(&cfg, cfg.problem.init)?;
    let out = run_experiment(&cfg, planned, n, seed)?;
    export(&args.out, &cfg, &out.summary, &out.records)?;
    print_summary(&out.summary);
    println!("\nwrote {}", args.out.display());
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let summary = import_summary(Path::new(&args.out)).with_context(|| format!("reading {}", args.out.display()))?;
    print_summary(&summary);
    Ok(())
}

fn verify(args: VerifyArgs) -> Result<bool> {
    let cfg = args.config.load()?;
    let reports = run_all(&cfg, args.seed);
    for r in &reports {
        println!("{r}");
    }
    let passed = reports.iter().filter(|r| r.passed).count();
    println!("{passed}/{} criteria passed", reports.len());
    Ok(passed == reports.len())
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    }
    match cli.command {
        Command::Plan(a) => plan(a).map(|_| true),
        Command::Rollout(a) => rollout(a).map(|_| true),
        Command::Experiment(a) => experiment(a).map(|_| true),
        Command::Report(a) => report(a).map(|_| true),
        Command::Verify(a) => verify(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
