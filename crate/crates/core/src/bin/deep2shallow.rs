use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use deep2shallow::error::Error;
use deep2shallow::experiment::{run_experiment, run_sweep, ExperimentConfig, SweepAxis};

/// Deep-to-shallow self-distillation experiments on synthetic biased data.
///
/// Configs without `output_dir` write to `$D2S_OUTPUT_ROOT/<config stem>`
/// (root defaults to `runs`).
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every requested mode for every seed and write artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Runs trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Replace the config's seed list with this single seed.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Repeat the experiment once per value of one tunable.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// gamma, alpha, shallow_tap_block, fixed_K, distance_kind or recluster_every.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn fail(code: u8, e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(code)
}

/// Loads and validates a config, resolving its output directory.
fn load(path: &Path) -> Result<(ExperimentConfig, PathBuf), Error> {
    let config = ExperimentConfig::load(path)?;
    config.validate()?;
    let stem = path.file_stem().map_or_else(|| "experiment".into(), |s| s.to_string_lossy().into_owned());
    let out = config.resolve_output_dir(&stem);
    Ok((config, out))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            jobs,
            seed_override,
        } => {
            let (mut config, out) = match load(&config) {
                Ok(c) => c,
                Err(e) => return fail(EXIT_CONFIG, &e),
            };
            if let Some(s) = seed_override {
                config.seeds = vec![s];
            }
            match run_experiment(&config, &out, jobs) {
                Ok(report) => {
                    for r in &report.summary {
                        println!(
                            "{:<10} unbiased {:.4}  worst-group {:.4}  ({} seed(s), val)",
                            r.mode.as_str(),
                            r.val_unbiased,
                            r.val_worst_group,
                            r.seeds
                        );
                    }
                    println!("artifacts in {}", out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(EXIT_RUNTIME, &e),
            }
        }
        Command::Sweep {
            config,
            axis,
            values,
            jobs,
        } => {
            let (config, out) = match load(&config) {
                Ok(c) => c,
                Err(e) => return fail(EXIT_CONFIG, &e),
            };
            let axis = match SweepAxis::parse(&axis) {
                Ok(a) => a,
                Err(e) => return fail(EXIT_CONFIG, &e),
            };
            let values: Vec<String> = values.into_iter().map(|v| v.trim().to_string()).collect();
            if let Err(e) = values.iter().try_for_each(|v| axis.apply(&config, v).map(drop)) {
                return fail(EXIT_CONFIG, &e);
            }
            match run_sweep(&config, axis, &values, &out, jobs) {
                Ok(entries) => {
                    for entry in &entries {
                        for r in &entry.report.summary {
                            println!(
                                "{}={:<8} {:<10} unbiased {:.4}  worst-group {:.4}",
                                axis.name(),
                                entry.value,
                                r.mode.as_str(),
                                r.val_unbiased,
                                r.val_worst_group
                            );
                        }
                    }
                    println!("artifacts in {}", out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(EXIT_RUNTIME, &e),
            }
        }
    }
}
