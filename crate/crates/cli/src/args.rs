use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "oncoclip", version, about = "Contrastive CT/report pre-training and evaluation toolkit")]
pub struct Cli {
    /// Worker threads; ONCOCLIP_THREADS overrides.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Locate the ROI, crop, resample and window one CT volume.
    Prep(PrepArgs),
    /// Generate a synthetic cohort with known ground truth.
    Synth(SynthArgs),
    /// Multi-task attribute pre-training of the image backbone.
    PretrainImage(PretrainImageArgs),
    /// Image–text contrastive alignment.
    PretrainClip(PretrainClipArgs),
    /// Grid-searched downstream head (classification or Cox).
    Finetune(FinetuneArgs),
    /// Prompt-ensemble zero-shot classification.
    EvalZeroshot(ZeroshotArgs),
    /// Cross-modal Recall@K.
    EvalRetrieval(RetrievalArgs),
    /// Kaplan–Meier, log-rank, Cox and time-dependent survival metrics.
    EvalSurvival(SurvivalArgs),
    /// Binary classification metric with a bootstrap interval.
    EvalClf(ClfArgs),
    /// BLEU, METEOR-lite and ROUGE-L on candidate/reference pairs.
    EvalText(TextArgs),
    /// Late fusion of per-phase logits.
    Fuse(FuseArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Prep(_) => "prep",
            Command::Synth(_) => "synth",
            Command::PretrainImage(_) => "pretrain-image",
            Command::PretrainClip(_) => "pretrain-clip",
            Command::Finetune(_) => "finetune",
            Command::EvalZeroshot(_) => "eval-zeroshot",
            Command::EvalRetrieval(_) => "eval-retrieval",
            Command::EvalSurvival(_) => "eval-survival",
            Command::EvalClf(_) => "eval-clf",
            Command::EvalText(_) => "eval-text",
            Command::Fuse(_) => "fuse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum StrategyArg {
    LargestAxialLesion,
    ForegroundCentroid,
}

#[derive(Debug, Args, Serialize)]
pub struct PrepArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long, value_enum, default_value = "largest_axial_lesion")]
    pub strategy: StrategyArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Window level (HU).
    #[arg(long, default_value_t = 50.0, allow_negative_numbers = true)]
    pub level: f64,
    /// Window width (HU).
    #[arg(long, default_value_t = 500.0)]
    pub width: f64,
    /// Physical crop extent in mm.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [140.0, 140.0, 160.0])]
    pub extent: Vec<f64>,
    /// Target voxel spacing in mm.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [1.0, 1.0, 5.0])]
    pub spacing: Vec<f64>,
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [140, 140, 32])]
    pub dims: Vec<usize>,
    /// Additionally center-crop to the model patch.
    #[arg(long)]
    pub center_crop: bool,
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [128, 128, 32])]
    pub patch: Vec<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 640)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "synth")]
    pub out: PathBuf,
    /// Exact number of phases per patient (random 1–4 when absent).
    #[arg(long)]
    pub phases: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub noise_sigma: f64,
    /// True log-hazard coefficient.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub beta: f64,
    /// Censoring rate; 0 disables censoring.
    #[arg(long, default_value_t = 0.02)]
    pub lambda_c: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    /// Trailing fraction of rows held out for validation.
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON training config; keys left out keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainImageArgs {
    /// `id,d0..` features or an `id,phase,d0..` phase file.
    #[arg(long)]
    pub inputs: PathBuf,
    /// `id,a0..` attribute labels; empty cells are missing.
    #[arg(long)]
    pub attributes: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 32)]
    pub features: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainClipArgs {
    /// `id,phase,d0..` phase file.
    #[arg(long)]
    pub phases: PathBuf,
    /// `{id, versions}` per line; version 0 is the original report.
    #[arg(long)]
    pub tokens: PathBuf,
    /// JSON list of token strings.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Checkpoint prefix whose `encoder` initializes the backbone.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 32)]
    pub features: usize,
    /// Joint embedding width (also the text encoder width).
    #[arg(long, default_value_t = 128)]
    pub embed_dim: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskArg {
    Classification,
    Cox,
}

#[derive(Debug, Args, Serialize)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub inputs: PathBuf,
    /// Labels (classification) or `id,time,event` (cox).
    #[arg(long)]
    pub targets: PathBuf,
    #[arg(long, value_enum, default_value = "classification")]
    pub task: TaskArg,
    #[arg(long, default_value = "label")]
    pub label_column: String,
    /// Checkpoint prefix providing a pre-trained `encoder`; identity when absent.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub batch_sizes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub lrs: Option<Vec<f64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub train_backbone: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ZsStrategy {
    Max,
    Stochastic,
}

#[derive(Debug, Args, Serialize)]
pub struct ZeroshotArgs {
    /// `{templates, classes}` prompt file.
    #[arg(long)]
    pub prompts: PathBuf,
    /// `id,d0..` image embeddings.
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value = "label")]
    pub label_column: String,
    /// Checkpoint prefix holding the text encoder.
    #[arg(long)]
    pub text_model: PathBuf,
    #[arg(long, value_enum, default_value = "max")]
    pub strategy: ZsStrategy,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct RetrievalArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub texts: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 3, 5])]
    pub k: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    /// Kaplan–Meier curves, per group when `--group` is given.
    Km,
    /// Log-rank test between two groups.
    Logrank,
    /// Median split of `score`, then log-rank.
    Stratify,
    /// Cox regression with Wald inference.
    Cox,
    /// Harrell and IPCW-truncated concordance of `score`.
    Cindex,
    /// Cumulative/dynamic AUC and IPCW Brier at `--times`.
    Td,
}

#[derive(Debug, Args, Serialize)]
pub struct SurvivalArgs {
    /// `id,time,event,score[,covariates..,group]`.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub analysis: Analysis,
    #[arg(long)]
    pub group: Option<String>,
    /// Cox covariate columns (default `score`).
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    /// Evaluation times (default: event-time quartiles).
    #[arg(long, value_delimiter = ',')]
    pub times: Option<Vec<f64>>,
    /// Truncation time for the IPCW C-index (default: largest observed time).
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum MetricArg {
    Auc,
    Prauc,
    Sensitivity,
    Specificity,
    F1,
}

#[derive(Debug, Args, Serialize)]
pub struct ClfArgs {
    /// `id,score,label`.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "auc")]
    pub metric: MetricArg,
    #[arg(long, default_value_t = 1000)]
    pub bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "score")]
    pub score_column: String,
    #[arg(long, default_value = "label")]
    pub label_column: String,
}

#[derive(Debug, Args, Serialize)]
pub struct TextArgs {
    /// `{id, candidate, reference}` per line.
    #[arg(long = "in")]
    pub input: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FuseArgs {
    /// Fine-tuned checkpoint prefix.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub phases: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Labels for the phase-count ablation.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value = "label")]
    pub label_column: String,
    /// Largest phase count in the ablation (default: fewest phases any patient has).
    #[arg(long)]
    pub max_phases: Option<usize>,
}
