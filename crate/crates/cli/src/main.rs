//! `moelab` command-line front end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use moelab::pipeline::Precision;

#[derive(Debug, Parser)]
#[command(
    name = "moelab",
    version,
    about = "Desk-scale mixture-of-experts language modeling"
)]
pub struct Cli {
    /// Seed overriding the configured one.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Run configuration file (flat `key = value` text).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Value type for training: single or double.
    #[arg(long, global = true, value_parser = parse_precision)]
    pub precision: Option<Precision>,

    #[command(subcommand)]
    pub command: Command,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse().map_err(|e: moelab::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a text corpus.
    Train(TrainArgs),
    /// Perplexity of a checkpoint on a text corpus.
    EvalPpl(EvalPplArgs),
    /// Zero- or few-shot multiple-choice evaluation of a checkpoint.
    EvalPrompt(EvalPromptArgs),
    /// Fine-tune a checkpoint as a multiple-choice classifier.
    Finetune(FinetuneArgs),
    /// Train a dense student with and without a teacher.
    Distill(DistillArgs),
    /// Analytic training cost of a model size.
    Flops(FlopsArgs),
    /// Speedup factor at one performance level.
    Speedup(SpeedupArgs),
    /// Speedup and scaling curves as CSV.
    Report(ReportArgs),
}

/// Settings shared by the commands that train.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// Training corpus: a text file or a directory of `.txt` files.
    #[arg(long)]
    pub corpus: Option<PathBuf>,

    /// Output directory for checkpoints and metrics.
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Experts per expert layer (0 for a dense model).
    #[arg(long)]
    pub experts: Option<usize>,

    #[arg(long)]
    pub max_steps: Option<u64>,

    /// Extra `key=value` config overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,

    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalPplArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,

    #[arg(long)]
    pub corpus: PathBuf,

    /// Tokens per scored block; defaults to the model context plus one.
    #[arg(long)]
    pub block_size: Option<usize>,

    /// Write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalPromptArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// JSONL task file.
    #[arg(long)]
    pub tasks: PathBuf,

    #[arg(long, default_value_t = 0)]
    pub k_shots: usize,

    /// Few-shot repetitions with different demonstrations.
    #[arg(long, default_value_t = 25)]
    pub runs: usize,

    /// Per-task results (JSONL).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// JSONL training tasks.
    #[arg(long)]
    pub train: PathBuf,

    /// JSONL validation tasks; otherwise part of the training file is held out.
    #[arg(long)]
    pub validation: Option<PathBuf>,

    #[arg(long, default_value_t = 3)]
    pub epochs: usize,

    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,

    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,

    /// Output directory for the report and the tuned checkpoint.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// Teacher checkpoint.
    #[arg(long)]
    pub teacher: PathBuf,

    #[command(flatten)]
    pub run: RunArgs,

    #[arg(long, default_value_t = 0.25)]
    pub ce_weight: f64,

    #[arg(long, default_value_t = 0.75)]
    pub soft_weight: f64,

    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    /// Layers.
    #[arg(long = "l")]
    pub layers: u64,

    /// Hidden dimension.
    #[arg(long = "h")]
    pub hidden: u64,

    /// Training tokens.
    #[arg(long)]
    pub tokens: f64,

    /// Count expert layers in every other block.
    #[arg(long)]
    pub moe: bool,

    #[arg(long, default_value_t = 512)]
    pub experts: u64,

    #[arg(long, default_value_t = moelab::flops::DEFAULT_SEQ_LEN)]
    pub seq_len: u64,

    #[arg(long, default_value_t = moelab::flops::DEFAULT_VOCAB)]
    pub vocab: u64,

    /// Print the full result as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct Orientation {
    /// Treat the metric as accuracy-like (default: perplexity-like).
    #[arg(long)]
    pub higher_is_better: bool,
}

#[derive(Debug, Args)]
pub struct SpeedupArgs {
    /// Performance level to compare at.
    #[arg(long)]
    pub target: f64,

    /// Dense observation `PERF:ZFLOPS`; repeatable.
    #[arg(long, value_name = "PERF:ZFLOPS")]
    pub dense: Vec<String>,

    /// MoE observation `PERF:ZFLOPS`; repeatable.
    #[arg(long, value_name = "PERF:ZFLOPS")]
    pub moe: Vec<String>,

    /// CSV with `family,perf,zflops` columns, added to the flags above.
    #[arg(long)]
    pub observations: Option<PathBuf>,

    #[command(flatten)]
    pub orientation: Orientation,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// CSV with `family,perf,zflops` columns.
    #[arg(long)]
    pub observations: Option<PathBuf>,

    /// Run summaries (`summary.json`) to use as observations.
    #[arg(long = "summary")]
    pub summaries: Vec<PathBuf>,

    /// Run directories whose periodic evaluations become observations.
    #[arg(long = "run")]
    pub runs: Vec<PathBuf>,

    /// Directory receiving `speedup.csv` and `scaling.csv`.
    #[arg(long)]
    pub out: PathBuf,

    #[command(flatten)]
    pub orientation: Orientation,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match std::panic::catch_unwind(|| commands::run(&cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
        // The panic message has already been printed by the hook.
        Err(_) => ExitCode::from(2),
    }
}
