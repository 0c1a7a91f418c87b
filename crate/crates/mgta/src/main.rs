//! `mgta` — dataset generation, training, evaluation, and inspection for
//! the motion-guided temporal BEV detection pipeline.
//!
//! Exit codes: 0 success, 1 usage or configuration problem, 2 data problem
//! (datasets, checkpoints, files), 3 numeric failure.

use clap::{Args, Parser, Subcommand};
use mgta::config::load_config;
use mgta::harness::{cmd_eval, cmd_gen, cmd_inspect, cmd_train};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Args, Debug)]
struct Common {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed of the selected command.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory of the selected command.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset of point-cloud sequences.
    Gen(Common),
    /// Train the detector in two stages (single-frame, then temporal).
    Train(Common),
    /// Evaluate a checkpoint: per-class AP, mAP, and latency.
    Eval(Common),
    /// Dump intermediate tensors (bev, motion, offsets, attention, heatmap).
    Inspect(Common),
}

#[derive(Parser, Debug)]
#[command(name = "mgta", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn run(cli: Cli) -> mgta::Result<()> {
    let common = match &cli.command {
        Command::Gen(c) | Command::Train(c) | Command::Eval(c) | Command::Inspect(c) => c,
    };
    let cfg = load_config(&common.config)?;
    let out = common.out.as_deref();
    match cli.command {
        Command::Gen(ref c) => cmd_gen(&cfg, c.seed, out),
        Command::Train(ref c) => cmd_train(&cfg, c.seed, out),
        Command::Eval(ref c) => cmd_eval(&cfg, c.seed, out).map(|_| ()),
        Command::Inspect(ref c) => cmd_inspect(&cfg, c.seed, out).map(|_| ()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Let clap print its rendered help/error, then use this tool's
            // exit convention (1 = usage) instead of clap's default 2.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
