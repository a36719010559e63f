use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedsim_core::commands;

/// Deterministic federated-learning backdoor simulator.
#[derive(Parser)]
#[command(name = "fedsim", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv, summary.csv, run.log.
    Run {
        /// Experiment configuration (flat key = value file).
        #[arg(long)]
        config: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one experiment per (value, seed) of a sweep file; writes sweep.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Sweep definition file (sweep.key / sweep.values / sweep.seeds).
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Benign-only reference: the same config with malicious clients removed.
    Benign {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export penultimate-layer embeddings of the trained global model.
    ExportEmbeddings {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which model to export; only 'final' is available.
        #[arg(long, default_value = "final")]
        round: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, out } => commands::cmd_run(config, out),
        Command::Sweep { config, sweep, out } => commands::cmd_sweep(config, sweep, out),
        Command::Benign { config, out } => commands::cmd_benign_ref(config, out),
        Command::ExportEmbeddings { config, out, round } => {
            commands::cmd_export_embeddings(config, out, round)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedsim: {e}");
            ExitCode::FAILURE
        }
    }
}
