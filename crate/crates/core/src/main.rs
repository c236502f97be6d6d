use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use lqrl::algorithms::{NSchedule, ScheduleConfig};
use lqrl::experiments::{resolve_problem, run_experiment, AlgoSelection, Experiment, ExperimentSpec};
use lqrl::{LqError, Result};

/// Environment variable holding the worker count.
const WORKERS_ENV: &str = "LQRL_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "lqrl", version, about = "Least-squares learning experiments for episodic LQ control")]
struct Cli {
    /// riccati-convergence | gap-scaling | estimation-scaling | identifiability | regret | sanity
    experiment: String,
    /// Built-in instance (scalar-canonical, planar, dependent-columns) or config file.
    #[arg(long, default_value = "planar")]
    problem: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    phases: Option<usize>,
    #[arg(long = "C")]
    c: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// N schedule for the discrete learner, e.g. fixed:10 or geo:10. Repeatable.
    #[arg(long)]
    nsched: Vec<String>,
    #[arg(long)]
    hsim: Option<f64>,
    /// Number of master seeds for the regret experiment.
    #[arg(long)]
    seeds: Option<usize>,
    /// alg1 | alg2 | all
    #[arg(long, default_value = "all")]
    algo: String,
    /// Riccati and Lyapunov grid intervals.
    #[arg(long)]
    grid: Option<usize>,
    /// Flip a sign inside the Riccati difference operator (sanity canary).
    #[arg(long)]
    inject_fault: bool,
}

fn build_spec(cli: &Cli) -> Result<ExperimentSpec> {
    let experiment: Experiment = cli.experiment.parse()?;
    let (problem, name) = resolve_problem(&cli.problem)?;
    let mut spec = ExperimentSpec::new(experiment, problem, &name, &cli.out);
    spec.seed = cli.seed;
    spec.schedule = ScheduleConfig {
        c: cli.c.unwrap_or(spec.schedule.c),
        delta: cli.delta.unwrap_or(spec.schedule.delta),
        phases: cli.phases.unwrap_or(spec.schedule.phases),
        ..spec.schedule
    };
    spec.nsched = cli
        .nsched
        .iter()
        .map(|s| NSchedule::parse(s))
        .collect::<Result<_>>()?;
    spec.h_sim = cli.hsim.unwrap_or(spec.h_sim);
    spec.seeds = cli.seeds.unwrap_or(spec.seeds);
    spec.algorithms = cli.algo.parse::<AlgoSelection>()?;
    spec.riccati_steps = cli.grid.unwrap_or(spec.riccati_steps);
    spec.inject_fault = cli.inject_fault;
    spec.validate()?;
    Ok(spec)
}

fn configure_workers() -> Result<()> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| LqError::Config(format!("{WORKERS_ENV} must be a positive integer")))?;
    if n == 0 {
        return Err(LqError::Config(format!("{WORKERS_ENV} must be a positive integer")));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| LqError::Config(e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let spec = match configure_workers().and_then(|_| build_spec(&cli)) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run_experiment(&spec) {
        Ok(outcome) => {
            for line in &outcome.report {
                println!("{line}");
            }
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e @ (LqError::Config(_) | LqError::Io(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
