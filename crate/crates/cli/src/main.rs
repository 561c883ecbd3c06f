//! `turntree`: train, roll out, evaluate and gradient-check the tree RL engine.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "turntree", version, about = "Turn-level tree rollouts and clipped policy optimisation on a synthetic tool-use task")]
struct Cli {
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Rollout worker threads.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Sequential execution and a zeroed timing column, for byte-identical output.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the training loop; writes metrics.csv, checkpoints and optional trees.jsonl.
    Train(RunArgs),
    /// Build trees with the initial or a checkpointed policy and write trees.jsonl.
    Rollout {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 1)]
        n_trees: usize,
        /// Policy checkpoint, JSON or binary.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Greedy-decoding success rate on fresh tasks.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Hop count of the evaluation tasks (default: first configured).
        #[arg(long)]
        hops: Option<usize>,
        /// Number of tasks (default: eval_tasks from the config).
        #[arg(long)]
        tasks: Option<usize>,
    },
    /// Finite-difference check of all three objectives' gradients.
    Gradcheck {
        /// Accepted for symmetry with the other subcommands; only log_level is read.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negative control: perturbs the analytic gradient.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
