//! Operator surface for the training stack: data generation, both training
//! stages, evaluation and reports.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.

mod commands;
pub mod plot;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::{run, EVAL_REPORT_FILE, METRICS_FILE, PROMPT_METRICS_FILE, SWEEP_FILE};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "cleft", version, about = "Contrastive language-image training with adapters and prompt tuning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic paired corpus described by the config.
    GenData(GenDataArgs),
    /// Stage 1: contrastive pretraining.
    Pretrain(PretrainArgs),
    /// Stage 2: learn the shared prompt context.
    PromptTune(PromptTuneArgs),
    /// Run evaluation protocols on a checkpoint.
    Eval(EvalArgs),
    /// Print parameter ratios or a preset config.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct Paths {
    /// Run configuration (flat JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `data_dir` from the config.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Overrides `out_dir` from the config.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Normalise pixels as `(x - mean) / std` after loading.
    #[arg(long, value_name = "MEAN,STD", value_parser = parse_normalize)]
    pub normalize: Option<(f32, f32)>,
}

fn parse_normalize(s: &str) -> Result<(f32, f32), String> {
    let (m, sd) = s.split_once(',').ok_or("expected MEAN,STD")?;
    let p = |v: &str| v.trim().parse::<f32>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(m)?, p(sd)?))
}

/// A comma-separated list argument.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvList<T>(pub Vec<T>);

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<CsvList<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|v| v.trim().parse::<T>().map_err(|e| format!("{v:?}: {e}")))
        .collect::<Result<_, _>>()
        .map(CsvList)
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub paths: Paths,
}

#[derive(Debug, Args)]
pub struct PromptTuneArgs {
    #[command(flatten)]
    pub paths: Paths,
    /// Stage-1 checkpoint to start from.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Context length; defaults to the config value.
    #[arg(long)]
    pub context_length: Option<usize>,
    /// Train once per listed length and write an accuracy-vs-length CSV.
    #[arg(long, value_name = "L1,L2,...", value_parser = parse_list::<usize>)]
    pub sweep: Option<CsvList<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// Zero-shot with handcrafted prompts instead of the learned context.
    NoPromptFt,
    /// Checkpoint trained with the whole language model frozen.
    FreezeLm,
    /// Checkpoint trained with every language-model weight trainable.
    FullFtLm,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::NoPromptFt => "no-prompt-ft",
            Ablation::FreezeLm => "freeze-lm",
            Ablation::FullFtLm => "full-ft-lm",
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub paths: Paths,
    /// Stage-1 checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Learned prompt context from `prompt-tune`.
    #[arg(long)]
    pub context: Option<PathBuf>,
    /// Zero-shot classification of the test split.
    #[arg(long)]
    pub zs: bool,
    /// Linear probe on frozen pooled vision features.
    #[arg(long)]
    pub lp: bool,
    /// Fine-tune the vision tower with a linear head.
    #[arg(long)]
    pub ft: bool,
    #[arg(long, value_enum)]
    pub ablation: Option<Ablation>,
    /// Also run LP/FT on class-stratified training subsets of these sizes.
    #[arg(long, value_name = "R1,R2,...", value_parser = parse_list::<f64>)]
    pub data_ratios: Option<CsvList<f64>>,
    /// Seeds for the data-ratio sweep.
    #[arg(long, value_parser = parse_list::<u64>, default_value = "0,1,2")]
    pub seeds: CsvList<u64>,
    /// Write an SVG chart of the metrics CSV.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Trainable-parameter ratios: published sizes and the configured model.
    #[arg(long)]
    pub ratios: bool,
    /// Config whose model is counted; the toy preset when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print a preset config as JSON.
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Toy,
    PaperScale,
}

/// Maps an error chain to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<cleft_core::Error>() {
            return match e {
                cleft_core::Error::NonFiniteGradient(_) => EXIT_NUMERIC,
                _ => EXIT_CONFIG,
            };
        }
    }
    EXIT_CONFIG
}
