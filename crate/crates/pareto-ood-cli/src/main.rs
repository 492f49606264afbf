//! Experiment CLI: invariant-set solving and front scans over the
//! analytic two-bit environments, training and sweeps on synthetic data,
//! model selection over logged histories, the sine extrapolation demo,
//! and a gradient integrity check.
//!
//! Every command reads a JSON config, writes CSV/JSONL/SVG artifacts plus
//! a manifest into `--out`, and is reproducible: the same config and seed
//! produce byte-identical files. Verbosity comes from `PARETO_OOD_LOG`.

mod artifacts;
mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "pareto-ood", version, about = "Preference-balanced multi-objective training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct CommonArgs {
    /// JSON config for the subcommand.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if absent).
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's seed where applicable.
    #[arg(long)]
    seed: Option<u64>,
    /// Allow overwriting existing artifacts.
    #[arg(long)]
    force: bool,
    /// Worker threads for parallel commands (default: logical cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the invariance constraint systems over (a, b).
    TwobitSolve(CommonArgs),
    /// Brute-force Pareto front scan over the (a, b) grid.
    TwobitFront(CommonArgs),
    /// Train one configuration and log its history.
    Train(CommonArgs),
    /// Run a grid of configurations in parallel.
    Sweep(CommonArgs),
    /// Select a run/step from a directory of histories.
    Select(CommonArgs),
    /// Sine-regression extrapolation comparison.
    SineDemo(CommonArgs),
    /// Finite-difference gradient integrity check.
    Gradcheck(CommonArgs),
}

/// Exit codes: 0 success, 1 runtime failure, 2 config problems.
fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("PARETO_OOD_LOG")).init();
    let cli = Cli::parse();
    let (name, args) = match &cli.command {
        Command::TwobitSolve(a) => ("twobit-solve", a),
        Command::TwobitFront(a) => ("twobit-front", a),
        Command::Train(a) => ("train", a),
        Command::Sweep(a) => ("sweep", a),
        Command::Select(a) => ("select", a),
        Command::SineDemo(a) => ("sine-demo", a),
        Command::Gradcheck(a) => ("gradcheck", a),
    };
    if let Some(workers) = args.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global() {
            eprintln!("failed to configure worker pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match name {
        "twobit-solve" => commands::twobit_solve(args),
        "twobit-front" => commands::twobit_front(args),
        "train" => commands::train(args),
        "sweep" => commands::sweep(args),
        "select" => commands::select(args),
        "sine-demo" => commands::sine_demo(args),
        "gradcheck" => commands::gradcheck(args),
        _ => unreachable!(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let msg = format!("{e:#}");
            eprintln!("error: {msg}");
            if msg.contains("config error")
                || msg.contains("missing field")
                || msg.contains("unknown field")
                || msg.contains("unknown variant")
                || msg.contains("invalid type")
                || msg.contains("expected")
            {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
