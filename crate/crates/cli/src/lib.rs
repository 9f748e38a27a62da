#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! File-staged driver for the rlhf pipeline. Every subcommand reads its
//! inputs from the work directory, writes its outputs there, and leaves a
//! manifest under `manifests/`.

pub mod commands;
pub mod config;
mod workspace;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("missing input {0}")]
    MissingInput(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Core(#[from] rlhf_core::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            CliError::GradCheck(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rlhf", version, about = "Desk-scale RLHF pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for batched evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Overrides the configured work directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    GenData,
    /// Quality-filter prompts, split and length-balance preference pairs.
    PrepareData,
    /// Corpus statistics of a preference-pair file.
    Stats {
        #[arg(long, default_value = "corpus/pairs.jsonl")]
        input: String,
    },
    TrainSft,
    TrainRm,
    /// Variance-filter the prompts, then run PPO.
    TrainPpo,
    TrainDpo,
    TrainRft,
    /// Oracle-judged win rates of model A against model B.
    EvalWinrate {
        #[arg(long, default_value = "ppo")]
        a: String,
        #[arg(long, default_value = "sft")]
        b: String,
    },
    /// Held-out accuracy, length bias and reward histogram.
    EvalRm,
    EvalLength {
        /// Comma-separated model names; the first is the baseline.
        #[arg(long, default_value = "sft,ppo,dpo,rft")]
        models: String,
    },
    /// SVG curves from the PPO metrics.
    Plot,
    PlanParallel {
        #[arg(long)]
        devices: Option<usize>,
        #[arg(long)]
        gen_share: Option<f64>,
        #[arg(long, value_enum)]
        workload: Option<Workload>,
    },
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        coords: usize,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum Workload {
    Ppo,
    SftOrDpo,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::PrepareData => "prepare-data",
            Command::Stats { .. } => "stats",
            Command::TrainSft => "train-sft",
            Command::TrainRm => "train-rm",
            Command::TrainPpo => "train-ppo",
            Command::TrainDpo => "train-dpo",
            Command::TrainRft => "train-rft",
            Command::EvalWinrate { .. } => "eval-winrate",
            Command::EvalRm => "eval-rm",
            Command::EvalLength { .. } => "eval-length",
            Command::Plot => "plot",
            Command::PlanParallel { .. } => "plan-parallel",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }
}

/// Loads the config, applies flag overrides and runs the command on the
/// requested number of threads.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.global.config {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.global.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.global.out {
        cfg.paths.work_dir = out.to_string_lossy().into_owned();
    }
    if cli.global.threads == 0 {
        return Err(CliError::Config("--threads must be positive".into()));
    }
    rlhf_core::par::with_threads(cli.global.threads, || commands::dispatch(&cfg, &cli.command))
}
