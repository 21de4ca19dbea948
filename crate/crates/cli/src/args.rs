use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Two-stage mitosis detection: synthesize data, tile slides, train the
/// proposer and classifier, run inference and score it.
///
/// Every tunable is a dotted configuration key (`proposer.conf_threshold`,
/// `loss.gamma`, ...). Settings apply in order: the built-in defaults, the
/// `--config` file, then each `--set`, then `--seed` and `--workers`.
#[derive(Debug, Parser)]
#[command(name = "mitodet", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// A `key = value` file, or the run.json of an earlier run to replay.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    /// Seed for every random stream (data, splits, initialization, augmentation).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for patch inference; 0 uses every core.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic annotated corpus with a split manifest.
    Synth(SynthArgs),
    /// Cut slides into overlapping patches with their annotations.
    Tile(TileArgs),
    /// Train the first-stage proposal network.
    TrainProposer(TrainProposerArgs),
    /// Mine candidate crops and train the second-stage classifier.
    TrainClassifier(TrainClassifierArgs),
    /// Run the tiled two-stage pipeline and write detections.
    Infer(InferArgs),
    /// Match detections against annotations and report P, R and F1.
    Evaluate(EvaluateArgs),
    /// Re-score cached proposals over a grid of thresholds.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,

    /// Number of images (same as `--set synth.n_images=N`).
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("input").required(true))]
pub struct TileArgs {
    /// Dataset directory with images/ and annotations.csv.
    #[arg(long, group = "input")]
    pub data: Option<PathBuf>,

    /// A single PNG slide.
    #[arg(long, group = "input")]
    pub image: Option<PathBuf>,

    /// Annotation CSV for `--image`.
    #[arg(long, requires = "image")]
    pub annotations: Option<PathBuf>,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainProposerArgs {
    #[arg(long)]
    pub data: PathBuf,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainClassifierArgs {
    #[arg(long)]
    pub data: PathBuf,

    /// Proposer checkpoint used to mine candidates, or `oracle:<annotations.csv>`.
    #[arg(long)]
    pub proposer: String,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("input").required(true))]
pub struct InferArgs {
    /// Dataset directory; images of `--split` are processed.
    #[arg(long, group = "input")]
    pub data: Option<PathBuf>,

    /// train, val, test or all.
    #[arg(long, default_value = "test", requires = "data")]
    pub split: String,

    /// A single PNG slide.
    #[arg(long, group = "input")]
    pub image: Option<PathBuf>,

    /// Image id for `--image`; defaults to the file stem.
    #[arg(long, requires = "image")]
    pub id: Option<String>,

    /// Proposer checkpoint, or `oracle:<annotations.csv>`.
    #[arg(long)]
    pub proposer: String,

    /// Classifier checkpoint, `none` for single-stage, or `oracle` to accept everything.
    #[arg(long, default_value = "none")]
    pub classifier: String,

    #[arg(long)]
    pub out: PathBuf,

    /// Also write PNG overlays of the final detections.
    #[arg(long)]
    pub overlay: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// A detection CSV or a directory of them; only final-stage rows count.
    #[arg(long)]
    pub dets: PathBuf,

    /// Annotation CSV with the true centers.
    #[arg(long)]
    pub gt: PathBuf,

    /// `center:<px>` or `iou:<threshold>` (same as `--set data.match_rule=...`).
    #[arg(long)]
    pub rule: Option<String>,

    /// Directory for report.csv and run.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Directory of proposal caches written by `infer`.
    #[arg(long)]
    pub caches: PathBuf,

    #[arg(long)]
    pub gt: PathBuf,

    /// Proposal confidence thresholds; defaults to `proposer.conf_threshold`.
    #[arg(long, value_delimiter = ',')]
    pub conf: Vec<f64>,

    /// Classifier thresholds; defaults to `classifier.threshold`.
    #[arg(long, value_delimiter = ',')]
    pub classifier: Vec<f64>,

    /// Merge IoU thresholds; defaults to `pipeline.merge_iou`.
    #[arg(long, value_delimiter = ',')]
    pub merge: Vec<f64>,

    #[arg(long)]
    pub out: PathBuf,
}
