use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Clone, Parser, Serialize)]
#[command(
    name = "fusionhead",
    version,
    about = "Fused-feature classification head: data generation, training, evaluation and explanations",
    args_override_self = true
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GlobalArgs {
    /// Seed for every random stream of the run.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    /// File of `key=value` lines; each key is a long flag name and
    /// overrides the command line.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case", tag = "command")]
pub enum Command {
    /// Generate a synthetic dataset (feature CSV, optionally images and a manifest).
    GenData(GenDataArgs),
    /// Extract fused, normalised features for every image of a manifest.
    Extract(ExtractArgs),
    /// Train on a 68/17/15 split and report held-out metrics.
    Train(TrainArgs),
    /// Score a checkpoint on a feature CSV.
    Evaluate(EvaluateArgs),
    /// Stratified k-fold cross-validation with a final retrain.
    Cv(CvArgs),
    /// Optimizer × learning-rate grid.
    Sweep(SweepArgs),
    /// Export one-vs-rest, micro and macro ROC curves.
    Roc(RocArgs),
    /// Explain one prediction with LIME or SHAP.
    Explain(ExplainArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 9)]
    pub classes: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long, default_value_t = 10.0)]
    pub separation: f64,
    /// Also render every sample as a PPM image and write manifest.csv.
    #[arg(long)]
    pub images: bool,
    #[arg(long, default_value_t = 48)]
    pub image_size: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExtractArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Augmented variants emitted per image in addition to the original.
    #[arg(long, default_value_t = 0)]
    pub augment_copies: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// k → 512 → 256 → 128 → 64 → C.
    Reference,
    /// k → 256 → 128 → 64 → C.
    Compact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AveragingArg {
    Weighted,
    Macro,
    Micro,
}

/// Input selection shared by the training commands.
#[derive(Debug, Clone, Args, Serialize)]
pub struct InputArgs {
    /// Feature CSV (`id,label,f0,…`).
    #[arg(long, conflicts_with = "manifest")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
    /// Image manifest (`id,path,label,source`); features are extracted on the fly.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Augmented copies per training image (manifest input only).
    #[arg(long, default_value_t = 1)]
    pub augment_copies: usize,
}

/// Model and optimisation settings shared by the training commands.
#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 0.95)]
    pub variance: f64,
    #[arg(long, value_enum, default_value_t = Arch::Reference)]
    pub arch: Arch,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Early-stopping patience in epochs.
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 5)]
    pub plateau_patience: usize,
    #[arg(long, value_enum, default_value_t = AveragingArg::Weighted)]
    pub averaging: AveragingArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "adam")]
    pub optimizer: String,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, value_enum, default_value_t = AveragingArg::Weighted)]
    pub averaging: AveragingArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CvArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "adam")]
    pub optimizer: String,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_value = "adam,adamw,rmsprop,sgd")]
    pub optimizers: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0.0001,0.001,0.01,0.1")]
    pub lrs: Vec<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RocArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Lime,
    Shap,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// A PPM image (explained over grid segments) or a feature CSV (explained
    /// over principal components).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub method: MethodArg,
    /// Row of a CSV input, by id or zero-based index.
    #[arg(long, default_value = "0")]
    pub row: String,
    /// Class to explain, by name or index; defaults to the predicted class.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    /// Feature CSV drawn on for background rows; defaults to the input CSV.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub background: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub background_size: usize,
    /// Perturbation budget; 1000 for LIME and 200 for SHAP when absent.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
}
