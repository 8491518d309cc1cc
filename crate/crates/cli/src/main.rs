//! Command-line front end for the action-signal diagnostic pipeline.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 stage failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use asl_core::experiment::TrainingScheme;
use asl_core::pipeline::{
    full_run, stage_preprocess, stage_report, stage_simulate, stage_train_bc, stage_train_dynamics,
    RunConfig,
};
use asl_core::trajectory::SeverityMetric;
use asl_core::Error;

#[derive(Parser)]
#[command(
    name = "asl",
    about = "Train severity-dynamics models with and without treatment inputs and report whether the recorded actions carry predictive signal.",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override both the cohort seed and the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker count for parallel stages.
    #[arg(long, global = true, env = "ASL_WORKERS")]
    workers: Option<usize>,

    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Restrict the grid to these metrics (comma-separated:
    /// sofa,sirs,shock_index).
    #[arg(long, global = true, value_delimiter = ',')]
    metrics: Option<Vec<String>>,

    /// Restrict the grid to these horizons in hours.
    #[arg(long, global = true, value_delimiter = ',')]
    horizons: Option<Vec<usize>>,

    /// Restrict the grid to these training schemes (comma-separated:
    /// actions_only,states_only,states_and_actions).
    #[arg(long, global = true, value_delimiter = ',')]
    schemes: Option<Vec<String>>,

    /// Restrict the grid to these model seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort CSV + sidecar.
    Simulate,
    /// Split, impute, normalize, and persist model-ready tensors.
    Preprocess,
    /// Train the dynamics grid and evaluate all four action conditions.
    TrainDynamics,
    /// Train the behavior-cloning replicates.
    TrainBc,
    /// Emit tables, the verdict, and histograms from stored results.
    Report,
    /// All stages in order.
    FullRun,
}

enum CliError {
    Usage(String),
    Stage(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match &e {
            Error::InvalidConfig(_) | Error::MalformedFile { .. } | Error::BadFractions(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Stage(e.to_string()),
        }
    }
}

fn build_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            if !path.exists() {
                return Err(CliError::Usage(format!("config file not found: {}", path.display())));
            }
            RunConfig::load_json(path)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.simulator.seed = seed;
        cfg.run_seed = seed;
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    if let Some(metrics) = &cli.metrics {
        cfg.grid.metrics = metrics
            .iter()
            .map(|m| {
                SeverityMetric::parse(m)
                    .ok_or_else(|| CliError::Usage(format!("unknown metric: {m}")))
            })
            .collect::<Result<_, _>>()?;
    }
    if let Some(horizons) = &cli.horizons {
        cfg.grid.horizons = horizons.clone();
    }
    if let Some(schemes) = &cli.schemes {
        cfg.grid.schemes = schemes
            .iter()
            .map(|s| {
                TrainingScheme::parse(s)
                    .ok_or_else(|| CliError::Usage(format!("unknown scheme: {s}")))
            })
            .collect::<Result<_, _>>()?;
    }
    if let Some(seeds) = &cli.seeds {
        cfg.grid.seeds = seeds.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = build_config(cli)?;
    let out = &cli.out;
    match cli.command {
        Command::Simulate => {
            stage_simulate(&cfg, out)?;
            println!(
                "simulate: wrote {} patients to {}",
                cfg.simulator.n_patients,
                out.join("cohort.csv").display()
            );
        }
        Command::Preprocess => {
            stage_preprocess(&cfg, out)?;
            println!("preprocess: wrote splits and stats under {}", out.join("splits").display());
        }
        Command::TrainDynamics => {
            let report = stage_train_dynamics(&cfg, out)?;
            println!(
                "train-dynamics: {} cells, {} failed, verdict: {}",
                report.cells.len(),
                report.n_failed,
                report.verdict.label
            );
            if report.n_failed > 0 {
                return Err(CliError::Stage(format!(
                    "{} grid cells failed; see {}",
                    report.n_failed,
                    out.join("dynamics/grid_report.json").display()
                )));
            }
        }
        Command::TrainBc => {
            let report = stage_train_bc(&cfg, out)?;
            println!(
                "train-bc: {} replicates, {} fits",
                report.seeds.len(),
                report.entries.len()
            );
        }
        Command::Report => {
            let outcome = stage_report(&cfg, out)?;
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            println!("report: wrote {} files under {}", outcome.files.len(), out.join("report").display());
        }
        Command::FullRun => {
            let outcome = full_run(&cfg, out)?;
            for w in &outcome.report.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "full-run: {} cells ({} failed), verdict: {}",
                outcome.grid.cells.len(),
                outcome.grid.n_failed,
                outcome.grid.verdict.label
            );
            if outcome.grid.n_failed > 0 {
                return Err(CliError::Stage(format!("{} grid cells failed", outcome.grid.n_failed)));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are success; anything else is usage.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run with --help for usage");
            ExitCode::from(1)
        }
        Err(CliError::Stage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
