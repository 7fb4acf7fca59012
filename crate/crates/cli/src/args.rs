//! Flag definitions. Every argument struct round-trips through serde so a
//! config file can fill in whatever the command line leaves unset; flags
//! without a default are `Option`s, checked after merging.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "keypose", version, about = "Keypoint pose estimation pipeline for top-down animal video")]
pub struct Cli {
    /// TOML file with one `[subcommand]` table of flag values; flags given
    /// on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand)]
pub enum Command {
    /// Copy a directory of frames into a new dataset.
    Ingest(IngestArgs),
    /// Pick keyframes to annotate by mini-batch k-means.
    Sample(SampleArgs),
    /// Render a contact sheet of augmented copies of one frame.
    AugmentPreview(AugmentPreviewArgs),
    /// Train the network on the annotated frames.
    Train(TrainArgs),
    /// Run a checkpoint over dataset frames.
    Predict(PredictArgs),
    /// Score predictions against the annotations.
    Evaluate(EvaluateArgs),
    /// Flag frames whose predictions jump between neighbours.
    Outliers(OutliersArgs),
    /// Serve the annotation API and static annotator assets.
    Serve(ServeArgs),
}

impl Command {
    /// The merged arguments as JSON, for the run log.
    pub fn resolved_config(&self) -> serde_json::Value {
        let v = match self {
            Command::Ingest(a) => serde_json::to_value(a),
            Command::Sample(a) => serde_json::to_value(a),
            Command::AugmentPreview(a) => serde_json::to_value(a),
            Command::Train(a) => serde_json::to_value(a),
            Command::Predict(a) => serde_json::to_value(a),
            Command::Evaluate(a) => serde_json::to_value(a),
            Command::Outliers(a) => serde_json::to_value(a),
            Command::Serve(a) => serde_json::to_value(a),
        };
        v.expect("argument structs serialize")
    }
}

pub(crate) fn required<'a, T>(value: &'a Option<T>, flag: &str) -> CliResult<&'a T> {
    value
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("missing required flag --{flag} (on the command line or in the config file)")))
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct IngestArgs {
    /// Directory holding the extracted frames.
    #[arg(long)]
    pub src: Option<PathBuf>,
    /// File-name glob selecting frames inside `--src`.
    #[arg(long, default_value = "*.png")]
    pub pattern: String,
    /// New dataset directory.
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// Skeleton table (`name,parent,swap`); the built-in pig skeleton when omitted.
    #[arg(long)]
    pub skeleton: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// Number of clusters.
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    /// Mini-batch size.
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.01)]
    pub reassignment_ratio: f64,
    /// Center-movement stopping tolerance; 0 disables it.
    #[arg(long, default_value_t = 0.0)]
    pub tol: f64,
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Frames kept per cluster; defaults to enough for 10% of the dataset.
    #[arg(long)]
    pub per_cluster: Option<usize>,
    /// Side of the grayscale thumbnails clustered.
    #[arg(long, default_value_t = keypose_core::sampler::DEFAULT_THUMB_SIDE)]
    pub thumb: usize,
    /// Seed centers uniformly instead of D²-weighted.
    #[arg(long)]
    pub uniform_init: bool,
    /// Baseline: evenly spaced frames, no clustering.
    #[arg(long)]
    pub uniform: bool,
    /// Where `keyframes.txt` and `clusters.csv` go; the dataset root by default.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct AugmentPreviewArgs {
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// Frame id; the first annotated frame (else the first frame) by default.
    #[arg(long)]
    pub frame: Option<u64>,
    #[arg(long, default_value_t = 3)]
    pub rows: usize,
    #[arg(long, default_value_t = 4)]
    pub cols: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output PNG; `augment_preview.png` in the dataset root by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// Checkpoint path; `model.ckpt` in the dataset root by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training history CSV; `history.csv` in the dataset root by default.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long, default_value_t = 400)]
    pub epochs: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    /// Fraction of annotated frames held out; 0 monitors the training loss.
    #[arg(long, default_value_t = 0.1)]
    pub validation_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Target Gaussian width in input pixels.
    #[arg(long, default_value_t = keypose_core::heatmap::DEFAULT_SIGMA)]
    pub sigma: f64,
    /// Output stride of the confidence maps.
    #[arg(long, default_value_t = keypose_core::heatmap::DEFAULT_DOWNSAMPLE)]
    pub downsample: usize,
    /// Frames are resized to this square side before entering the network.
    #[arg(long, default_value_t = 96)]
    pub input_side: usize,
    #[arg(long, default_value_t = 2)]
    pub stacks: usize,
    /// Encoder-decoder levels per stack.
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long, default_value_t = 2)]
    pub block_layers: usize,
    #[arg(long, default_value_t = 8)]
    pub growth: usize,
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameSelection {
    All,
    Annotated,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// `model.ckpt` in the dataset root by default.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Pose table output; `predictions.csv` in the dataset root by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FrameSelection::All)]
    pub frames: FrameSelection,
    /// Also write each frame's tiled confidence maps as PNG here.
    #[arg(long)]
    pub dump_maps: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// `predictions.csv` in the dataset root by default.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Match radius in frame pixels.
    #[arg(long, default_value_t = keypose_core::analysis::DEFAULT_MATCH_RADIUS)]
    pub radius: f64,
    /// Where `thresholds.csv` and `keypoint_errors.csv` go; the dataset root by default.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct OutliersArgs {
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// `predictions.csv` in the dataset root by default.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Peaks must exceed mean + c·stddev of the score series.
    #[arg(long, default_value_t = keypose_core::analysis::DEFAULT_PROMINENCE)]
    pub c: f64,
    #[arg(long, default_value_t = keypose_core::analysis::DEFAULT_MIN_SEPARATION)]
    pub min_separation: usize,
    /// Weight of the normalized position change against the score change.
    #[arg(long, default_value_t = keypose_core::analysis::DEFAULT_POSITION_WEIGHT)]
    pub position_weight: f64,
    /// Where `outlier_scores.csv` goes; the dataset root by default.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ServeArgs {
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// Enables warm-start predictions.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    /// Built annotator assets served at `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}
