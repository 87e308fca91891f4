//! `sisda` experiment harness.
//!
//! Subcommands mirror the pipeline: `generate` a corpus, `train-base` the
//! source model, `adapt` it to the target domain with any method, `analyze`
//! token reliance on a labeled split, and `report` the collected metrics.
//! Every flag can come from an environment variable with the `SISDA_`
//! prefix (`SISDA_SEED`, `SISDA_OUT`, ...); explicit flags win over the
//! environment, which wins over the config file.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "sisda", version, about = "Saliency-guided domain adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config file (TOML); defaults apply when absent.
    #[arg(long, env = "SISDA_CONFIG", value_name = "path")]
    config: Option<PathBuf>,

    /// Global seed; overrides the config file.
    #[arg(long, env = "SISDA_SEED", value_name = "int")]
    seed: Option<u64>,

    /// Run directory holding corpus files, checkpoints, and metrics.
    #[arg(long, env = "SISDA_OUT", value_name = "dir", default_value = "runs/default")]
    out: PathBuf,
}

impl CommonArgs {
    fn load_config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the four corpus split files.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Supervised training on source-train; writes the base checkpoint.
    TrainBase {
        #[command(flatten)]
        common: CommonArgs,

        /// Checkpoint path (resumed when it already exists).
        #[arg(long, env = "SISDA_CHECKPOINT", value_name = "path")]
        checkpoint: Option<PathBuf>,
    },
    /// Adapt the base model on target-adapt and append metrics records.
    Adapt {
        #[command(flatten)]
        common: CommonArgs,

        /// zero-shot, sft, or an unsupervised method name.
        #[arg(long, env = "SISDA_METHOD", value_name = "name")]
        method: Option<String>,

        /// Base checkpoint to adapt from.
        #[arg(long, env = "SISDA_CHECKPOINT", value_name = "path")]
        checkpoint: Option<PathBuf>,
    },
    /// Per-utterance token-reliance breakdown on target-test.
    Analyze {
        #[command(flatten)]
        common: CommonArgs,

        /// Checkpoint to analyze.
        #[arg(long, env = "SISDA_CHECKPOINT", value_name = "path")]
        checkpoint: Option<PathBuf>,
    },
    /// Render metrics.jsonl as an aligned table plus CSV.
    Report {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate { common } => {
            commands::cmd_generate(&common.load_config()?, &common.out)
        }
        Command::TrainBase { common, checkpoint } => {
            commands::cmd_train_base(&common.load_config()?, &common.out, checkpoint.as_deref())
        }
        Command::Adapt {
            common,
            method,
            checkpoint,
        } => commands::cmd_adapt(
            &common.load_config()?,
            method.as_deref(),
            &common.out,
            checkpoint.as_deref(),
        ),
        Command::Analyze { common, checkpoint } => {
            commands::cmd_analyze(&common.load_config()?, &common.out, checkpoint.as_deref())
        }
        Command::Report { common } => commands::cmd_report(&common.out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // One line, machine-parsable: `error: <cause>: <cause>: ...`.
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
