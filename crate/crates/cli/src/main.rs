//! `mdmt`: multi-dataset multi-domain multi-task training experiments.
//!
//! Subcommands: gen, train, distill, eval, grid, lr-trace. One TOML config
//! drives everything; `--set key=value` overrides individual keys; the
//! `MDMT_OUT_DIR` environment variable overrides the output directory.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime failure,
//! 3 divergence abort.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use mdmt_core::error::Error;
use mdmt_core::trainer::Variant;

use config::ExperimentConfig;

#[derive(Debug)]
pub struct CliError {
    message: String,
    code: u8,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { message: message.into(), code: 1 }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError { message: message.into(), code: 2 }
    }

    pub fn diverged(message: impl Into<String>) -> Self {
        CliError { message: message.into(), code: 3 }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_)
            | Error::Parse { .. }
            | Error::UnknownTask(_)
            | Error::UnknownDataset(_)
            | Error::Checkpoint(_) => 1,
            Error::Divergence { .. } => 3,
            _ => 2,
        };
        CliError { message: e.to_string(), code }
    }
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Experiment config file (TOML).
    #[arg(long, short = 'c')]
    config: PathBuf,
    /// Override a config key, e.g. --set train.epochs=10 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        ExperimentConfig::load(&self.config, &self.set)
    }
}

#[derive(Parser, Debug)]
#[command(name = "mdmt", version, about = "multi-dataset multi-domain multi-task training engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic suite and write dataset files + manifest.
    Gen(ConfigArgs),
    /// Train one variant with one seed; writes report, trace CSV, checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Ablation variant slug (e.g. baseline, 2md-mtl, distill-da-2md-mtl).
        #[arg(long)]
        variant: String,
        #[arg(long)]
        seed: u64,
    },
    /// Fill missing labels with a trained teacher, then retrain a student.
    Distill {
        #[command(flatten)]
        config: ConfigArgs,
        /// Teacher checkpoint file.
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Evaluate a checkpoint on a dataset file; prints accuracy and the
    /// confusion matrix.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        task: usize,
        /// Write the confusion matrix CSV here instead of stdout.
        #[arg(long)]
        confusion: Option<PathBuf>,
    },
    /// Run the ablation grid (variants x seeds) and write grid.csv.
    Grid(ConfigArgs),
    /// Export a plot-ready lr trace CSV from a run report.
    LrTrace {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run() -> Result<(), CliError> {
    let cli = Cli::try_parse().map_err(|e| {
        // clap already renders help/version text; keep it
        let _ = e.print();
        CliError { message: String::new(), code: if e.use_stderr() { 1 } else { 0 } }
    })?;
    match cli.command {
        Command::Gen(args) => commands::cmd_gen(&args.load()?),
        Command::Train { config, variant, seed } => {
            let cfg = config.load()?;
            let variant = Variant::parse(&variant)?;
            commands::cmd_train(&cfg, variant, seed)
        }
        Command::Distill { config, teacher, seed } => {
            commands::cmd_distill(&config.load()?, &teacher, seed)
        }
        Command::Eval { checkpoint, dataset, task, confusion } => {
            commands::cmd_eval(&checkpoint, &dataset, task, confusion.as_deref())
        }
        Command::Grid(args) => commands::cmd_grid(&args.load()?),
        Command::LrTrace { report, out } => commands::cmd_lr_trace(&report, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !e.message.is_empty() {
                eprintln!("error: {}", e.message);
            }
            ExitCode::from(e.code)
        }
    }
}
