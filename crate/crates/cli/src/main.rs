//! `mtl`: generate synthetic data, train, evaluate, run sweeps and score
//! labels.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or
//! checkpoint error, 3 numerical abort.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mtl_core::trainer::{ScaleAxis, TaskOrder};
use mtl_core::{Error, Task};

#[derive(Parser, Debug)]
#[command(name = "mtl", version, about = "Multi-task fine-tuning for claim detection, evidence re-ranking and stance detection")]
pub struct Cli {
    /// TOML config; keys override the defaults (or the toy profile).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory for checkpoints, tables and logs.
    #[arg(long, global = true, env = "MTL_OUT_DIR", default_value = "runs")]
    pub out: PathBuf,

    /// Dataset directory; overrides `data.dir` from the config.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Start from the desk-scale toy profile instead of the full defaults.
    #[arg(long, global = true)]
    pub toy: bool,

    /// Parallel runs in sweeps; overrides `sweep.workers`.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic train/validation/test files for every task.
    GenData {
        /// Examples per split, overriding the configured sizes.
        #[arg(long)]
        size: Option<usize>,
        /// Overwrite existing files.
        #[arg(long)]
        force: bool,
    },
    /// Train one model and write its checkpoint and metrics.
    Train,
    /// Evaluate a checkpoint on one split.
    Eval {
        /// Checkpoint directory [default: <out>/checkpoint].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Tasks to evaluate [default: tasks with positive weight].
        #[arg(long, value_delimiter = ',')]
        task: Vec<Task>,
    },
    /// One run per loss-weight triple in `sweep.weights`.
    SweepWeights,
    /// One staged run per task order.
    SweepOrder {
        /// Orders such as `C-S-R,R-S-C` [default: `sweep.orders`].
        #[arg(long, value_delimiter = ',')]
        orders: Vec<TaskOrder>,
    },
    /// Model-size or training-fraction curve.
    SweepScale {
        #[arg(long, value_enum)]
        axis: Axis,
    },
    /// Print the log-likelihood of every label for one input.
    Score {
        /// Checkpoint directory [default: <out>/checkpoint].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        task: Task,
        /// Claim, query, or text to classify.
        #[arg(long)]
        text: String,
        /// Evidence or snippet for pair tasks.
        #[arg(long)]
        second: Option<String>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Axis {
    Model,
    Data,
}

impl From<Axis> for ScaleAxis {
    fn from(a: Axis) -> Self {
        match a {
            Axis::Model => ScaleAxis::Model,
            Axis::Data => ScaleAxis::Data,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NumericalAbort { .. } | Error::NonFinite { .. } => 3,
        Error::Io(_)
        | Error::Parse { .. }
        | Error::UnknownLabel { .. }
        | Error::Checkpoint(_)
        | Error::Csv(_)
        | Error::Json(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::NumericalAbort { .. } = e {
                eprintln!("the last completed epoch's checkpoint is kept in {}", cli.out.join("checkpoint").display());
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
