use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mqem::cli;

/// Quantum-trajectory error mitigation experiment runner.
#[derive(Parser)]
#[command(name = "mqem", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override run.trajectories.
    #[arg(long)]
    trajectories: Option<usize>,
    /// Override run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override run.workers (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory (default: out/<subcommand>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Dense master-equation reference curves.
    Oracle(Common),
    /// Trajectory unravelling vs the dense oracle.
    Unravel(Common),
    /// Martingale-reweighted mitigation pipeline.
    Mitigate(Common),
    /// Ancilla-qubit (discrete-step) mitigation pipeline.
    Lv(Common),
    /// Empirical mitigation cost and its bounds.
    Cost(Common),
    /// Quasi-probability channel-inverse estimator.
    Qprob(Common),
}

fn main() -> ExitCode {
    let parsed = Cli::parse();
    let (sub, common) = match parsed.command {
        Command::Oracle(c) => (cli::Subcommand::Oracle, c),
        Command::Unravel(c) => (cli::Subcommand::Unravel, c),
        Command::Mitigate(c) => (cli::Subcommand::Mitigate, c),
        Command::Lv(c) => (cli::Subcommand::Lv, c),
        Command::Cost(c) => (cli::Subcommand::Cost, c),
        Command::Qprob(c) => (cli::Subcommand::Qprob, c),
    };
    let overrides = cli::Overrides {
        trajectories: common.trajectories,
        seed: common.seed,
        workers: common.workers,
        out: common.out,
    };
    match cli::run(sub, &common.config, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
