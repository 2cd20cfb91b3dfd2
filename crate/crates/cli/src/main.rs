//! `mmfl` — run experiments, ablation grids and figures from the command line.
//!
//! Exit codes: 0 success, 1 configuration/input error, 2 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mmfl_core::harness::{emit_plots, run_ablation_suite, run_experiment, Ablation, ExperimentConfig, Overrides, Partition};
use mmfl_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "mmfl", version, about = "Federated multi-modal learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, value_parser = parse_partition)]
        partition: Option<Partition>,
        #[arg(long, value_parser = parse_ablation)]
        ablation: Option<Ablation>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render figures from a metrics file.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every ablation for every seed and write summary.csv.
    Suite {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated list, e.g. `1,2,3`.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_partition(s: &str) -> std::result::Result<Partition, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config, beta, partition, ablation, rounds, seed, out } => {
            let overrides = Overrides { beta, partition, ablation, rounds, seed, out };
            let cfg = ExperimentConfig::load_with(&config, &overrides)?;
            let outcome = run_experiment::<f64>(&cfg)?;
            let acc = outcome.final_accuracy();
            println!(
                "{}: complete {:.4} image_only {:.4} text_only {:.4}",
                outcome.out_dir.display(),
                acc.complete,
                acc.image_only,
                acc.text_only
            );
        }
        Command::Plot { metrics, out } => {
            for path in emit_plots(&metrics, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Suite { config, seeds, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let summary = run_ablation_suite::<f64>(&cfg, &seeds, &out)?;
            for (a, m) in &summary.means {
                println!("{a:<14} complete {:.4} image_only {:.4} text_only {:.4}", m.complete, m.image_only, m.text_only);
            }
            println!("{}", summary.path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { mmfl_core::error::EXIT_CONFIG as u8 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
