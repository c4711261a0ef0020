//! Command-line driver for the lab-ordering pipeline.
//!
//! Exit status: 0 success, 2 usage or configuration error, 3 invariant
//! violation, 4 artifacts produced from incompatible inputs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use labpolicy::pipeline::{self, PipelineError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "labpolicy", version, about = "Learn and evaluate ICU lab-ordering policies")]
struct Cli {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON run configuration; defaults apply to anything omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding every artifact of the run.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a cohort and write its event file and summary.
    Simulate {
        #[arg(long)]
        n_admissions: Option<usize>,
    },
    /// Import an external event CSV into the output directory.
    Ingest {
        #[arg(long)]
        events: PathBuf,
    },
    /// Split the cohort and fit the trait forecaster.
    Forecast,
    /// Build the reward context and the train/test transition datasets.
    BuildTransitions,
    /// Run MO-FQI, calibrate the cost slack and fit the per-lab policies.
    Train {
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Off-policy evaluation and clinical metrics on the test admissions.
    Evaluate,
    /// Render the evaluation as markdown.
    Report,
}

fn load_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut run = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        run.seed = seed;
    }
    match &cli.command {
        Command::Simulate { n_admissions: Some(n) } => run.cohort.n_admissions = *n,
        Command::Train { iterations, batch_size } => {
            if let Some(k) = iterations {
                run.fqi.iterations = *k;
            }
            if let Some(n) = batch_size {
                run.fqi.batch_size = *n;
            }
        }
        _ => {}
    }
    run.validate()?;
    Ok(run)
}

fn execute(cli: &Cli, run: &RunConfig) -> Result<(), PipelineError> {
    let out: &Path = &cli.out;
    match &cli.command {
        Command::Simulate { .. } => {
            let s = pipeline::cmd_simulate(run, out)?;
            println!(
                "simulated {} admissions ({} patient-hours) into {}",
                s.n_admissions,
                s.total_hours,
                out.display()
            );
        }
        Command::Ingest { events } => {
            let r = pipeline::cmd_ingest(run, out, events)?;
            println!(
                "ingested {} of {} admissions ({} dropped for length of stay, {} for missing traits)",
                r.retained, r.admissions_read, r.dropped.length_of_stay, r.dropped.missing_trait
            );
        }
        Command::Forecast => {
            let f = pipeline::cmd_forecast(run, out)?;
            println!(
                "forecaster fit on {} training admissions ({} held out); hash {}",
                f.train_ids.len(),
                f.test_ids.len(),
                f.config_hash
            );
        }
        Command::BuildTransitions => {
            let (train, test) = pipeline::cmd_build_transitions(run, out)?;
            println!("built {train} training and {test} test transitions");
        }
        Command::Train { .. } => {
            let s = pipeline::cmd_train(run, out, |m| {
                log::info!(
                    "iteration {}: mean |dQ| = {:?}, pareto size {:.2}, fallbacks {}",
                    m.iteration,
                    m.mean_abs_delta,
                    m.mean_pareto_size,
                    m.fallbacks
                );
            })?;
            for t in &s.tuning {
                println!(
                    "{}: eps_cost {:.4} gives {} orders (target {}){}",
                    t.lab,
                    t.epsilon_cost,
                    t.recommended,
                    t.target,
                    if t.reached { "" } else { ", target not reached" }
                );
            }
        }
        Command::Evaluate => {
            let e = pipeline::cmd_evaluate(run, out)?;
            println!(
                "evaluated {} policies on {} test admissions; results in {}",
                e.joint_values.len() / 4,
                e.n_test_admissions,
                out.join(pipeline::EVALUATION_FILE).display()
            );
        }
        Command::Report => {
            print!("{}", pipeline::cmd_report(out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = load_config(&cli).and_then(|run| execute(&cli, &run));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
