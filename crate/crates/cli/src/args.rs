use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "plantseg", version, about = "Zero-shot plant segmentation and its supervised baseline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GlobalArgs {
    /// TOML config file with dataset roots, checkpoints and cache location.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Feature cache directory; overrides the config file.
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    /// Recompute token features instead of using the cache.
    #[arg(long, global = true)]
    pub no_cache: bool,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit and orient the token PCA on one split of a dataset.
    FitPca(FitPcaArgs),
    /// Predict plant masks for one split.
    Segment(SegmentArgs),
    /// Score a directory of predicted masks against ground truth.
    Evaluate(EvaluateArgs),
    /// Segment with and without the coarse mask prompt and score both arms.
    AblateMaskInput(SegmentArgs),
    /// Train one U-Net on a (sub)set of the training split.
    TrainBaseline(TrainBaselineArgs),
    /// Mean U-Net IoU against training-subset size.
    ScalingCurve(ScalingCurveArgs),
    /// Score U-Nets trained on one dataset on the others.
    CrossEval(CrossEvalArgs),
    /// Histogram of first-component token scores.
    PcaHist(PcaHistArgs),
    /// Dataset layout checks and fixtures.
    #[command(subcommand)]
    Datasets(DatasetsCommand),
    /// Render comparison tables from result CSVs.
    Report(ReportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::FitPca(_) => "fit-pca",
            Command::Segment(_) => "segment",
            Command::Evaluate(_) => "evaluate",
            Command::AblateMaskInput(_) => "ablate-mask-input",
            Command::TrainBaseline(_) => "train-baseline",
            Command::ScalingCurve(_) => "scaling-curve",
            Command::CrossEval(_) => "cross-eval",
            Command::PcaHist(_) => "pca-hist",
            Command::Datasets(DatasetsCommand::Verify(_)) => "datasets verify",
            Command::Datasets(DatasetsCommand::MakeMini(_)) => "datasets make-mini",
            Command::Report(_) => "report",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DatasetArgs {
    /// phenobench, appletree, plantgrowth, cvppp2017, or mini-fixture.
    #[arg(long)]
    pub dataset: String,
    /// Dataset root; overrides the config file and environment.
    #[arg(long)]
    pub root: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    /// Fitted PCA model; fitted on `--fit-split` when absent.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    pub fit_split: String,
    /// Most tokens used for the fit; larger populations are subsampled.
    #[arg(long, default_value_t = plantseg::pca::FitOptions::default().token_cap)]
    pub token_cap: usize,
    /// Negate the excess-green orientation.
    #[arg(long)]
    pub flip: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitPcaArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    #[arg(long, default_value = "plantnet-dinov2")]
    pub encoder: String,
    #[arg(long, default_value = "val")]
    pub fit_split: String,
    #[arg(long, default_value_t = plantseg::pca::FitOptions::default().token_cap)]
    pub token_cap: usize,
    #[arg(long)]
    pub flip: bool,
    #[arg(long, default_value = "runs/fit-pca")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SegmentArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// plantnet-dinov2, dinov2-base or synthetic.
    #[arg(long, default_value = "plantnet-dinov2")]
    pub encoder: String,
    /// sam2 or trivial.
    #[arg(long, default_value = "sam2")]
    pub refiner: String,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Score at or above which a token is plant.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub threshold: f64,
    /// 4 or 8.
    #[arg(long, default_value_t = 8)]
    pub connectivity: u8,
    /// Drop components with fewer tokens.
    #[arg(long, default_value_t = 1)]
    pub min_tokens: usize,
    /// Attach the coarse 256x256 mask to every box prompt.
    #[arg(long)]
    pub use_mask_input: bool,
    /// One box around all plant tokens instead of one per component.
    #[arg(long)]
    pub single_box: bool,
    /// Write component labels and boxes as JSON per image.
    #[arg(long)]
    pub debug_dump: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    /// Directory of `<image_id>_pred.png` masks.
    #[arg(long)]
    pub predictions: PathBuf,
    #[command(flatten)]
    pub data: DatasetArgs,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Method label written to the results CSV.
    #[arg(long, default_value = "predictions")]
    pub method: String,
    /// Record the predictions as produced with a mask prompt.
    #[arg(long)]
    pub mask_input_used: bool,
    #[arg(long, default_value = "runs/evaluate")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ArchArgs {
    /// Encoder depth of the U-Net.
    #[arg(long, default_value_t = plantseg::baseline::UnetConfig::default().levels)]
    pub levels: usize,
    /// Channels of the first level.
    #[arg(long, default_value_t = plantseg::baseline::UnetConfig::default().width)]
    pub width: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, default_value_t = plantseg::baseline::TrainConfig::default().learning_rate)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = plantseg::baseline::TrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = plantseg::baseline::TrainConfig::default().max_epochs)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = plantseg::baseline::TrainConfig::default().patience)]
    pub patience: usize,
    /// Cap the shortest edge at 518 instead of 1036.
    #[arg(long)]
    pub fast: bool,
    #[arg(long, default_value = "train")]
    pub train_split: String,
    #[arg(long, default_value = "val")]
    pub val_split: String,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainBaselineArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Train on a seeded random subset of this size.
    #[arg(long)]
    pub subset_size: Option<usize>,
    #[arg(long, default_value = "runs/train-baseline")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScalingCurveArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Ascending subset sizes.
    #[arg(long, value_delimiter = ',', default_values_t = plantseg::baseline::DESK_SIZES)]
    pub sizes: Vec<usize>,
    /// Runs per size (default 5, or 100 with --paper-scale).
    #[arg(long)]
    pub repetitions: Option<usize>,
    /// Full protocol: 100 repetitions per size.
    #[arg(long)]
    pub paper_scale: bool,
    /// Zero-shot mean IoU to compare against.
    #[arg(long, conflicts_with = "zero_shot")]
    pub zero_shot_mean: Option<f64>,
    /// Results CSV of the zero-shot method on this dataset.
    #[arg(long)]
    pub zero_shot: Option<PathBuf>,
    /// Method to take from `--zero-shot` when it holds several.
    #[arg(long)]
    pub zero_shot_method: Option<String>,
    #[arg(long, default_value = "runs/scaling-curve")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CrossEvalArgs {
    /// `NAME=PATH` of a U-Net checkpoint trained on dataset NAME (repeatable).
    #[arg(long = "model", required = true)]
    pub models: Vec<String>,
    /// Target dataset (repeatable).
    #[arg(long = "dataset", required = true)]
    pub datasets: Vec<String>,
    #[arg(long, default_value = "val")]
    pub split: String,
    #[arg(long, default_value = "runs/cross-eval")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PcaHistArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    #[arg(long, default_value = "val")]
    pub split: String,
    #[arg(long, default_value = "plantnet-dinov2")]
    pub encoder: String,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 100)]
    pub bins: usize,
    #[arg(long, default_value = "runs/pca-hist")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum DatasetsCommand {
    /// Check a dataset root against its documented layout.
    Verify(VerifyArgs),
    /// Write a small synthetic look-alike of a dataset.
    MakeMini(MakeMiniArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    /// `sha256sum`-style file of relative paths to check.
    #[arg(long)]
    pub checksums: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MakeMiniArgs {
    /// Layout to imitate.
    #[arg(long)]
    pub dataset: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReportArgs {
    /// Per-image results CSVs.
    #[arg(long = "results")]
    pub results: Vec<PathBuf>,
    /// Cross-evaluation matrix CSVs.
    #[arg(long = "cross")]
    pub cross: Vec<PathBuf>,
    /// Also write `report.md` here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
