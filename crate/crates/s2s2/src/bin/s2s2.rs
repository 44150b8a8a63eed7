//! Command-line entry point: one verb per experiment activity.
//!
//! Exit codes: 0 ok, 1 verification failure, 2 config error, 3 IO error,
//! 4 corrupt artifact, 5 run failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use s2s2::harness::{self, HarnessError};

#[derive(Parser)]
#[command(name = "s2s2", version, about = "Semantic-stacking segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOut {
    /// Output directory for artifacts and the run manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run the theory checks (stacking law, posterior update, bound).
    Verify {
        #[command(flatten)]
        out: CommonOut,
        /// Root seed for the verification RNG stream.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Deliberately break the predicted std (negative control).
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Generate a synthetic dataset from a JSON config.
    Gen {
        /// JSON config: {"dataset": {...}, "seed": N}.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: CommonOut,
        /// Replace the config's seed.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Train one model from a JSON job config.
    Train {
        /// JSON config: {"train": {...}, "dataset_dir": "...", "seed": N}.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: CommonOut,
        /// Replace the config's seed.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Evaluate a checkpoint on one test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset_dir: PathBuf,
        /// test_source or test_target.
        #[arg(long)]
        split: String,
        #[command(flatten)]
        out: CommonOut,
        /// Debug: score the ground truth against itself.
        #[arg(long, hide = true)]
        oracle: bool,
    },
    /// Run the mode ladder over several seeds and summarize.
    Compare {
        /// JSON config: {"dataset": {...}, "train": {...}, "modes": [...], "seeds": [...]}.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: CommonOut,
        /// Worker threads for (mode, seed) cells; each cell stays
        /// single-threaded.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Verify {
            out,
            seed,
            inject_fault,
        } => harness::cmd_verify(&out.out, seed, inject_fault),
        Command::Gen {
            config,
            out,
            seed_override,
        } => harness::cmd_gen(&config, &out.out, seed_override),
        Command::Train {
            config,
            out,
            seed_override,
        } => harness::cmd_train(&config, &out.out, seed_override),
        Command::Eval {
            checkpoint,
            dataset_dir,
            split,
            out,
            oracle,
        } => harness::cmd_eval(&checkpoint, &dataset_dir, &split, &out.out, oracle),
        Command::Compare {
            config,
            out,
            threads,
        } => harness::cmd_compare(&config, &out.out, threads),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
