//! `afm` command-line driver.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::commands::EvalModel;
use crate::config::FlagOverrides;
use crate::error::{CliError, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "afm", version, about = "Multitask training with per-task neuron masks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Auto,
    Supervised,
    Rl,
}

#[derive(Subcommand)]
enum Command {
    /// Train both image tasks with masks and a controller.
    TrainSupervised(Common),
    /// Train the copy and duplicate-dropping agents.
    TrainRl(Common),
    /// Find a sparse mask for one task with variational dropout.
    Sparsify(Common),
    /// Find a mask for one task with genetic search.
    SearchMask(Common),
    /// Evaluate a saved checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Overrides `eval.checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Layout the checkpoint is read as.
        #[arg(long, value_enum, default_value = "auto")]
        model: ModelArg,
    },
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    let env = std::env::vars().collect();
    let resolve = |common: &Common, checkpoint: Option<PathBuf>| {
        let flags = FlagOverrides {
            seed: common.seed,
            out_dir: common.out.clone(),
            checkpoint,
        };
        config::resolve(common.config.as_deref(), &env, &flags)
    };
    match cli.command {
        Command::TrainSupervised(c) => commands::train_supervised(&resolve(&c, None)?),
        Command::TrainRl(c) => commands::train_rl(&resolve(&c, None)?),
        Command::Sparsify(c) => commands::sparsify(&resolve(&c, None)?),
        Command::SearchMask(c) => commands::search_mask(&resolve(&c, None)?),
        Command::Eval {
            common,
            checkpoint,
            model,
        } => {
            let model = match model {
                ModelArg::Auto => EvalModel::Auto,
                ModelArg::Supervised => EvalModel::Supervised,
                ModelArg::Rl => EvalModel::Rl,
            };
            commands::eval(&resolve(&common, checkpoint)?, model)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(report) => {
            println!("{}", report.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
