//! Command-line orchestration of the harforge pipeline.

pub mod config;
pub mod error;
pub mod report;
pub mod stages;

use std::path::PathBuf;

use clap::{Parser, ValueEnum};

pub use config::{Overrides, PipelineConfig};
pub use error::CliError;
pub use stages::{Context, Outcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, ValueEnum)]
pub enum Stage {
    Synth,
    Ingest,
    Align,
    Impute,
    Dataset,
    Train,
    Eval,
    Viz,
    Pipeline,
}

impl Stage {
    /// Execution order of `pipeline`.
    pub const ORDER: [Stage; 8] = [
        Stage::Synth,
        Stage::Ingest,
        Stage::Align,
        Stage::Impute,
        Stage::Dataset,
        Stage::Train,
        Stage::Eval,
        Stage::Viz,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Align => "align",
            Stage::Impute => "impute",
            Stage::Dataset => "dataset",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Viz => "viz",
            Stage::Pipeline => "pipeline",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Temporal,
    User,
}

#[derive(Debug, Parser)]
#[command(name = "harforge", version, about = "Wearable activity-recognition pipeline")]
pub struct Args {
    /// Stage to run; `pipeline` runs all of them in order.
    #[arg(value_enum)]
    pub stage: Stage,
    /// Configuration file; defaults to $HARFORGE_CONFIG when set.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Window width in minutes; repeat for several.
    #[arg(long = "width")]
    pub widths: Vec<usize>,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Overwrite outputs produced under a different configuration.
    #[arg(long)]
    pub force: bool,
}

pub fn run(args: &Args) -> Result<Vec<(Stage, Outcome)>, CliError> {
    let overrides = Overrides {
        seed: args.seed,
        widths: args.widths.clone(),
        split: args.split.map(|s| match s {
            SplitArg::Temporal => "temporal".into(),
            SplitArg::User => "user".into(),
        }),
    };
    let config = PipelineConfig::load(args.config.as_deref(), &overrides)?;
    let ctx = Context {
        out: args.out.clone(),
        config,
        force: args.force,
    };
    stages::run(&ctx, args.stage)
}
