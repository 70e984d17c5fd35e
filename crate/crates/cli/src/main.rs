use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use comhom::data::{generate_synth_cohort, save_dataset, SynthCohortSpec};
use comhom::experiment::{load_reports, run_experiment, write_aggregates, ExperimentConfig, ExperimentError};
use comhom::verify::gradient_suite;

#[derive(Parser)]
#[command(name = "comhom", version, about = "Combination-homomorphic gesture feature experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort in the dataset directory format.
    SynthData {
        /// Cohort spec JSON; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a full experiment from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Concurrent (fold, seed, grid point) runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Rebuild aggregate tables from the per-run reports in a directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Finite-difference check of every layer and the composed model.
    GradCheck {
        #[arg(long, default_value_t = 10)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Failure classes mapped to process exit codes.
enum Failure {
    Runs(usize),
    Config(anyhow::Error),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn config_error(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn synth_data(spec: Option<PathBuf>, out: PathBuf, seed: u64) -> Result<(), Failure> {
    let spec: SynthCohortSpec = match spec {
        Some(path) => {
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display())).map_err(config_error)?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())).map_err(config_error)?
        }
        None => SynthCohortSpec::default(),
    };
    let dataset = generate_synth_cohort(&spec, seed).map_err(config_error)?;
    save_dataset(&dataset, &out).with_context(|| format!("writing {}", out.display()))?;
    log::info!("wrote {} windows for {} subjects to {}", dataset.len(), dataset.subjects().len(), out.display());
    Ok(())
}

fn run(config: PathBuf, jobs: usize) -> Result<(), Failure> {
    let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display())).map_err(config_error)?;
    let cfg = ExperimentConfig::from_json(&text).with_context(|| format!("in {}", config.display())).map_err(config_error)?;
    let outcome = match run_experiment(&cfg, jobs) {
        Ok(o) => o,
        Err(e @ (ExperimentError::Config(_) | ExperimentError::Data(_))) => return Err(config_error(e)),
        Err(e) => return Err(Failure::Other(e.into())),
    };
    let completed = outcome.pretraining_runs - outcome.failures.len();
    println!("completed {completed} of {} runs, results in {}", outcome.pretraining_runs, cfg.output.display());
    if outcome.failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runs(outcome.failures.len()))
    }
}

fn report(input: PathBuf) -> Result<(), Failure> {
    let reports = load_reports(&input).context("loading reports")?;
    if reports.is_empty() {
        return Err(config_error(anyhow::anyhow!("no reports found under {}", input.display())));
    }
    write_aggregates(&input, &reports, 0).context("writing aggregates")?;
    println!("aggregated {} reports into {}", reports.len(), input.join("aggregate").display());
    Ok(())
}

fn grad_check(points: usize, seed: u64) -> Result<(), Failure> {
    let cases = gradient_suite(points, seed).context("running gradient suite")?;
    let mut failed = 0;
    for case in &cases {
        let status = if case.passed() { "ok" } else { "FAIL" };
        let r = &case.report;
        println!("{status:<4} point {:>2} {:<40} max rel error {:.3e} ({} entries, {} on a kink)", case.point, case.name, r.max_rel_error(), r.checked(), r.on_kink());
        failed += usize::from(!case.passed());
    }
    if failed > 0 {
        Err(Failure::Runs(failed))
    } else {
        Ok(())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("COMHOM_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthData { spec, out, seed } => synth_data(spec, out, seed),
        Command::Run { config, jobs } => run(config, jobs),
        Command::Report { input } => report(input),
        Command::GradCheck { points, seed } => grad_check(points, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Runs(n)) => {
            eprintln!("error: {n} run(s) failed");
            ExitCode::from(1)
        }
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
