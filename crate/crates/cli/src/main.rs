//! `mtda`: generate synthetic data, train, evaluate, check gradients and run
//! ablations.
//!
//! Exit status: 0 on success, 1 when a verification fails, 2 for bad input or
//! configuration, 3 when training hits a non-finite loss.

mod commands;
mod config;
mod failure;
mod manifest;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mtda_core::grad_suite::SuiteSize;

use commands::eval::Predictor;
use commands::gradcheck::Fault;

#[derive(Parser)]
#[command(
    name = "mtda",
    version,
    about = "Temporal action segmentation with mixed temporal domain adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic source/target dataset pair.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on <data>/source with unlabeled <data>/target.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "all")]
        split: String,
    },
    /// Score a checkpoint on one labeled domain directory.
    Eval {
        #[arg(long, required_unless_present = "identity_predictor")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "all")]
        split: String,
        /// Debug: predict the ground truth instead of running a model.
        #[arg(long, conflicts_with = "checkpoint")]
        identity_predictor: bool,
        /// Write metrics.json and a manifest here instead of printing JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op and the full model.
    Gradcheck {
        #[arg(long, default_value = "small", value_parser = parse_size)]
        size: SuiteSize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true, value_enum)]
        inject_fault: Option<Fault>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every configured mode and stage selection and tabulate them.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "all")]
        split: String,
        /// Runs trained in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn parse_size(s: &str) -> Result<SuiteSize, String> {
    s.parse()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { config, out } => commands::generate::run(&config, &out),
        Command::Train {
            config,
            data,
            out,
            split,
        } => commands::train::run(&config, &data, &out, &split),
        Command::Eval {
            checkpoint,
            data,
            split,
            identity_predictor,
            out,
        } => {
            let predictor = match &checkpoint {
                Some(p) if !identity_predictor => Predictor::Checkpoint(p),
                _ => Predictor::Identity,
            };
            commands::eval::run(predictor, &data, &split, out.as_deref())
        }
        Command::Gradcheck {
            size,
            seed,
            inject_fault,
            out,
        } => commands::gradcheck::run(size, seed, inject_fault, out.as_deref()),
        Command::Ablate {
            config,
            data,
            out,
            split,
            jobs,
        } => commands::ablate::run(&config, &data, &out, &split, jobs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("mtda: {f}");
            f.exit_code()
        }
    }
}
