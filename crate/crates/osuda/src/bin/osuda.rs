//! Thin driver over `osuda::cli`. All logic lives in the library; this
//! file only parses flags and maps errors to exit codes (2 usage/data,
//! 3 numerical divergence).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use osuda::cli;

#[derive(Parser)]
#[command(name = "osuda", about = "one-shot style-mixing domain adaptation on synthetic scenes")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the source / target-eval / target-pool datasets.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the source-only baseline checkpoint.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the multi-run one-shot adaptation protocol.
    Adapt {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Cap on total runs (pick-major truncation of the grid).
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Optional metrics CSV destination.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the three ablation grids and write one CSV per grid.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        runs: Option<usize>,
    },
}

fn run(args: Args) -> osuda::error::Result<()> {
    match args.cmd {
        Cmd::GenData { config, out, seed } => {
            let cfg = cli::resolve_config(config.as_deref(), seed)?;
            cli::cmd_gen_data(&cfg, &out)
        }
        Cmd::Pretrain { config, out, seed } => {
            let cfg = cli::resolve_config(config.as_deref(), seed)?;
            cli::cmd_pretrain(&cfg, &out)
        }
        Cmd::Adapt {
            config,
            out,
            seed,
            runs,
        } => {
            let cfg = cli::resolve_config(config.as_deref(), seed)?;
            cli::cmd_adapt(&cfg, &out, runs).map(|_| ())
        }
        Cmd::Eval {
            checkpoint,
            dataset,
            out,
        } => cli::cmd_eval(&checkpoint, &dataset, out.as_deref()).map(|_| ()),
        Cmd::Ablate {
            config,
            out,
            seed,
            runs,
        } => {
            let cfg = cli::resolve_config(config.as_deref(), seed)?;
            cli::cmd_ablate(&cfg, &out, runs).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
