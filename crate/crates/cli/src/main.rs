//! Operator CLI for the detection/attribution pipeline.
//!
//! Stages: ingest -> reason -> train -> predict -> evaluate -> report.
//! Every command writes `<out-dir>/<command>.manifest.json` before doing
//! any work. Exit codes: 0 success, 2 validation failure (structured
//! JSON on stderr), 1 anything else.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use aidetect_core::classifier::DEFAULT_THRESHOLD;
use aidetect_core::reasoning::TEMPLATE_BACKEND_ID;
use aidetect_core::training::TrainConfig;

#[derive(Parser)]
#[command(name = "aidetect", version, about = "AI-generated text detection and attribution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    globals: Globals,
}

#[derive(Args)]
pub struct Globals {
    /// Seed for every random choice (splits, shuffles); recorded in the manifest.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    /// Stdout rendering of the command summary.
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Text)]
    pub format: OutputFormat,
    /// Directory receiving artifacts and manifests.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Validate datasets into a canonical corpus plus stats (optionally split).
    Ingest(IngestArgs),
    /// Generate reasoning texts for a corpus into a cache.
    Reason(ReasonArgs),
    /// Train the classifier heads into a run directory.
    Train(TrainArgs),
    /// Predict labels for a corpus with a saved checkpoint.
    Predict(PredictArgs),
    /// Score a predictions file against gold labels.
    Evaluate(EvaluateArgs),
    /// Rank named metrics reports into a method table.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct IngestArgs {
    /// Dataset files (JSONL or CSV by extension).
    #[arg(required = true)]
    pub paths: Vec<PathBuf>,
    /// Train/val/test fractions (e.g. 0.7,0.15,0.15); also writes
    /// train.jsonl/val.jsonl/test.jsonl.
    #[arg(long, value_parser = parse_fractions, value_name = "T,V,E")]
    pub split: Option<SplitFractions>,
}

#[derive(Clone, Debug)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

fn parse_fractions(s: &str) -> Result<SplitFractions, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected three comma-separated fractions".into());
    }
    let mut values = [0f64; 3];
    for (value, part) in values.iter_mut().zip(&parts) {
        *value = part.trim().parse().map_err(|e| format!("bad fraction {part:?}: {e}"))?;
    }
    Ok(SplitFractions { train: values[0], val: values[1], test: values[2] })
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Template,
    Http,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditioningKind {
    Gold,
    Inference,
}

#[derive(Args)]
pub struct ReasonArgs {
    /// Corpus to generate reasonings for.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Reasoning cache file (created if absent, appended otherwise).
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long, value_enum, default_value_t = BackendKind::Template)]
    pub backend: BackendKind,
    /// Conditioning label source: gold labels (training data) or the
    /// label-free inference placeholder.
    #[arg(long, value_enum, default_value_t = ConditioningKind::Gold)]
    pub conditioning: ConditioningKind,
    /// Concurrent backend calls.
    #[arg(long, default_value_t = 4)]
    pub max_inflight: usize,
    /// Retries per document on transient backend failures.
    #[arg(long, default_value_t = 2)]
    pub max_retries: u32,
    /// Chat-completion endpoint URL (http backend).
    #[arg(long, required_if_eq("backend", "http"))]
    pub endpoint: Option<String>,
    /// Model name sent to the endpoint (http backend).
    #[arg(long, required_if_eq("backend", "http"))]
    pub model: Option<String>,
    /// Environment variable holding the API token (http backend).
    #[arg(long)]
    pub token_env: Option<String>,
    #[arg(long, default_value_t = 30)]
    pub timeout_secs: u64,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Labeled training corpus.
    #[arg(long)]
    pub train: PathBuf,
    /// Labeled validation corpus (drives checkpoint selection).
    #[arg(long)]
    pub val: PathBuf,
    /// Reasoning cache with gold-conditioned entries (required unless --no-cot).
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Train on raw documents without reasoning (ablation baseline).
    #[arg(long)]
    pub no_cot: bool,
    /// Backend id the cache entries were generated with.
    #[arg(long, default_value = TEMPLATE_BACKEND_ID)]
    pub backend_id: String,
    /// Total epoch target (a resumed run continues up to this).
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = TrainConfig::default().weight_decay)]
    pub weight_decay: f64,
    /// Task A decision threshold.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Consecutive epochs without validation improvement tolerated
    /// before stopping early.
    #[arg(long, default_value_t = TrainConfig::default().early_stop_patience)]
    pub patience: usize,
    /// Adds the classification loss on the reasoning-only encoding.
    #[arg(long)]
    pub aux_reasoning_loss: bool,
    /// Hashed-encoder dimension (ignored with --encoder-dir or --resume).
    #[arg(long, default_value_t = 2048)]
    pub dim: usize,
    /// Load a prepared encoder directory instead of the hashed default.
    #[arg(long)]
    pub encoder_dir: Option<PathBuf>,
    /// Continue this run directory from its saved checkpoint.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args)]
pub struct PredictArgs {
    /// Checkpoint directory (a run's checkpoints/best).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus to predict; labels may be absent.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Reasoning cache with inference-conditioned entries (CoT checkpoints).
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Backend id the cache entries were generated with.
    #[arg(long, default_value = TEMPLATE_BACKEND_ID)]
    pub backend_id: String,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Predictions JSONL produced by `predict`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Gold-labeled corpus.
    #[arg(long)]
    pub gold: PathBuf,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Named metrics report, repeatable: NAME=metrics.json.
    #[arg(long = "run", required = true, value_name = "NAME=METRICS_JSON")]
    pub run: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            e.report();
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> error::Result<()> {
    std::fs::create_dir_all(&cli.globals.out_dir)?;
    match &cli.command {
        Command::Ingest(args) => commands::ingest(args, &cli.globals),
        Command::Reason(args) => commands::reason(args, &cli.globals),
        Command::Train(args) => commands::train(args, &cli.globals),
        Command::Predict(args) => commands::predict(args, &cli.globals),
        Command::Evaluate(args) => commands::evaluate(args, &cli.globals),
        Command::Report(args) => commands::report(args, &cli.globals),
    }
}
