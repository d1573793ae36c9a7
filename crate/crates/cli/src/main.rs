//! `progtrig`: corpus generation, training, scoring and evaluation.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use progtrig::decision::LateTarget;
use progtrig::scorer::Aggregation;
use progtrig::synthgen::Split;
use progtrig::Error;

#[derive(Parser, Debug)]
#[command(name = "progtrig", version, about = "Progressive two-stage voice trigger detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run configuration; flags take precedence over its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; every module seed is derived from it [default: 1].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for all artifacts of this command.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads [default: number of cores].
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus (WAVs plus manifest.jsonl) under --out.
    GenData(GenArgs),
    /// Train a model on the corpus' training split.
    Train(TrainArgs),
    /// Score candidates at every post-trigger context.
    Score(ScoreArgs),
    /// Calibrate two-stage thresholds and write reports and figures.
    CalibrateEvaluate(EvalArgs),
    /// Replay the negative timeline through the first pass and the policy.
    SimulateStream(StreamArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    /// Positive utterances [default: 2000].
    #[arg(long)]
    pub n_positive: Option<usize>,
    /// Negative utterances [default: 600].
    #[arg(long)]
    pub n_negative: Option<usize>,
    /// Hours of negative timeline [default: 2].
    #[arg(long)]
    pub timeline_hours: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Corpus directory or manifest file.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Adam learning rate [default: 0.0008].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Global gradient-norm clipping threshold [default: 20].
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Items per batch, half phonetic and half discriminative [default: 16].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Total optimizer steps [default: 3000].
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Weight of the discriminative loss [default: 1].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Fail when holdout accuracy ends below this value.
    #[arg(long)]
    pub accuracy_floor: Option<f64>,
    /// Continue from this checkpoint (must hold optimizer state).
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Post-trigger contexts in seconds [default: 0.3,0.5,1,1.5,2].
    #[arg(long, value_delimiter = ',')]
    pub contexts: Option<Vec<f64>>,
    /// Early-score context in seconds [default: 0.3].
    #[arg(long)]
    pub early_context: Option<f64>,
    /// Late-score context in seconds [default: 2].
    #[arg(long)]
    pub late_context: Option<f64>,
    /// Manifest split to score.
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Only score these utterance ids (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub ids: Option<Vec<String>>,
    /// Skip the negative timeline.
    #[arg(long)]
    pub no_timeline: bool,
    /// Frame-score reduction [default: max].
    #[arg(long, value_enum)]
    pub aggregation: Option<AggregationArg>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Corpus directory (for the timeline length).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Score export from `score` [default: <out>/scores.csv].
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Fraction of positives allowed below the early threshold [default: 0.03].
    #[arg(long)]
    pub early_frr: Option<f64>,
    /// Fraction of positives allowed below the late threshold [default: 0.01].
    #[arg(long)]
    pub late_frr: Option<f64>,
    /// Population the late target is measured over [default: all-positives].
    #[arg(long, value_enum)]
    pub late_target: Option<LateTargetArg>,
    /// False accepts allowed on the timeline at the operating point [default: 50].
    #[arg(long)]
    pub fa_budget: Option<usize>,
    /// Early-score context in seconds [default: 0.3].
    #[arg(long)]
    pub early_context: Option<f64>,
    /// Late-score context in seconds [default: 2].
    #[arg(long)]
    pub late_context: Option<f64>,
}

#[derive(Args, Debug)]
pub struct StreamArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// thresholds.json from `calibrate-evaluate`.
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
    /// Early accept threshold, overriding --thresholds.
    #[arg(long)]
    pub early_threshold: Option<f64>,
    /// Late accept threshold, overriding --thresholds.
    #[arg(long)]
    pub late_threshold: Option<f64>,
}

#[derive(clap::ValueEnum, Debug, Clone, Copy)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(clap::ValueEnum, Debug, Clone, Copy)]
pub enum AggregationArg {
    Max,
    Mean,
}

impl From<AggregationArg> for Aggregation {
    fn from(a: AggregationArg) -> Aggregation {
        match a {
            AggregationArg::Max => Aggregation::Max,
            AggregationArg::Mean => Aggregation::Mean,
        }
    }
}

#[derive(clap::ValueEnum, Debug, Clone, Copy)]
pub enum LateTargetArg {
    AllPositives,
    DeferredOnly,
}

impl From<LateTargetArg> for LateTarget {
    fn from(a: LateTargetArg) -> LateTarget {
        match a {
            LateTargetArg::AllPositives => LateTarget::AllPositives,
            LateTargetArg::DeferredOnly => LateTarget::DeferredOnly,
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        e if e.is_numeric() => 4,
        Error::Config(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Score(a) => commands::score(a),
        Command::CalibrateEvaluate(a) => commands::calibrate_evaluate(a),
        Command::SimulateStream(a) => commands::simulate_stream(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
