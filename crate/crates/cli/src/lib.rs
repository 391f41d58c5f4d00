//! `damage` command-line tool.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use damage_core::data::DataError;
use damage_core::pipeline::PipelineError;
use damage_core::render::RenderError;
use thiserror::Error;

use config::Preset;

/// Exit status for bad flags, config files or invalid settings.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status for failures while running a valid command.
pub const EXIT_RUNTIME: i32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_)
            | PipelineError::InputSize { .. }
            | PipelineError::Channels { .. } => CliError::Config(e.to_string()),
            PipelineError::Data(d) => d.into(),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidConfig(_) | DataError::CropTooLarge { .. } => {
                CliError::Config(e.to_string())
            }
            e => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<RenderError> for CliError {
    fn from(e: RenderError) -> Self {
        match e {
            RenderError::Data(d) => d.into(),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Building damage assessment from pre/post-disaster image pairs.
///
/// Typical flow: `synth` a dataset, `train --stage 1`, `train --stage 2
/// --from-stage1 <ckpt>`, `predict`, `score`, then `render` damage maps.
/// Exit codes: 0 success, 2 configuration error, 1 runtime error.
#[derive(Debug, Parser)]
#[command(name = "damage", version)]
pub struct Cli {
    /// TOML run configuration. `damage config` prints the schema with defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the effective configuration (defaults merged with --config) as TOML.
    Config,
    /// Generate a seeded synthetic dataset in the xBD tile layout.
    Synth(SynthArgs),
    /// Train stage 1 (building segmentation) or stage 2 (damage classes).
    Train(TrainArgs),
    /// Predict masks for one pair or for every pair of a dataset.
    Predict(PredictArgs),
    /// Score predicted masks against ground truth.
    Score(ScoreArgs),
    /// Render images and masks side by side with the damage legend.
    Render(RenderArgs),
    /// Recover a class-id mask from a panel of a rendered PNG.
    Decode(DecodeArgs),
    /// Render original and CutMix-mixed pairs for visual audit.
    AugmentPreview(PreviewArgs),
    /// Parameter counts and multiply-accumulates of both stages.
    Summary(SummaryArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory (images/, targets/, manifest.json).
    #[arg(long)]
    pub out: PathBuf,
    /// Number of pairs [config: synth.num_pairs, default 50].
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Tile side in pixels [config: synth.image_size, default 64].
    #[arg(long)]
    pub size: Option<usize>,
    /// Generator seed [config: synth.seed, default 0].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// 1: buildings from pre-images. 2: damage classes from pairs.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Dataset root [config: paths.data].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to write [default: <paths.runs>/stage<N>.ckpt]. A JSON
    /// sidecar `<out>.json` and a JSON-lines log `<out>.log.jsonl` go next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Stage-1 checkpoint to start stage 2 from (required for stage 2).
    #[arg(long, value_name = "CKPT")]
    pub from_stage1: Option<PathBuf>,
    /// Hyperparameter preset. desk: 64 px crops, lr 1.5e-4/2e-4, 30/10 epochs.
    /// full: 512 px crops, lr 1.5e-4/2e-4, 120/20 epochs [config: train.preset].
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Learning rate, overriding the preset.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Square training crop; a multiple of 2^depth.
    #[arg(long)]
    pub crop: Option<usize>,
    /// Seed for initialization, shuffling and augmentation [config: train.seed].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Share of pairs (last in id order) held out for per-epoch scoring.
    #[arg(long)]
    pub holdout: Option<f64>,
    /// Disable hard-class CutMix in stage 2.
    #[arg(long)]
    pub no_cutmix: bool,
    /// Print the resolved training settings as JSON and exit.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Pre-disaster image (single-pair mode).
    #[arg(long, requires = "out", conflicts_with = "data")]
    pub pre: Option<PathBuf>,
    /// Post-disaster image (single-pair mode, stage 2).
    #[arg(long, requires = "pre")]
    pub post: Option<PathBuf>,
    /// Dataset root; writes `<out>/<id>_post_disaster_target.png` per pair.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output mask PNG (single pair) or directory (dataset).
    #[arg(long)]
    pub out: PathBuf,
    /// Window size [default: training crop].
    #[arg(long)]
    pub crop: Option<usize>,
    /// Window overlap in pixels [default: crop / 4].
    #[arg(long)]
    pub overlap: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Ground-truth masks: a dataset root (uses targets/) or a flat directory.
    #[arg(long, required_unless_present = "fixture")]
    pub truth: Option<PathBuf>,
    /// Predicted damage masks, matched to truth by id.
    #[arg(long, required_unless_present = "fixture")]
    pub pred: Option<PathBuf>,
    /// Stage-1 building masks; F1_b is taken from these instead of `--pred`.
    #[arg(long)]
    pub building_pred: Option<PathBuf>,
    /// Average scores over images instead of pooling all pixels.
    #[arg(long)]
    pub per_image: bool,
    /// Write the JSON report here.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Score stored per-class F1 values instead of masks: a JSON array of
    /// `{"name", "f1_building", "f1_per_class": [no, minor, major, destroyed]}`.
    #[arg(long, conflicts_with_all = ["truth", "pred", "building_pred", "per_image"])]
    pub fixture: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Panels left to right. 8-bit grayscale PNGs are class-id masks, other
    /// PNGs are images. All panels must share dimensions.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Output PNG; the panel layout is written to `<out>.layout.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// PNG written by `render` or `augment-preview`.
    pub render: PathBuf,
    /// Panel column.
    #[arg(long)]
    pub panel: usize,
    /// Panel row.
    #[arg(long, default_value_t = 0)]
    pub row: usize,
    /// Layout file [default: <render>.layout.json].
    #[arg(long)]
    pub layout: Option<PathBuf>,
    /// Output mask PNG (8-bit class ids).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreviewArgs {
    /// Dataset root [config: paths.data].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output PNG; the layout is written to `<out>.layout.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Rows, taken from the first pairs in id order.
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    /// Mixing seed [config: cutmix.seed].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Mix probability for the preview [default: 1].
    #[arg(long)]
    pub probability: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SummaryArgs {
    /// Input side for the MAC count [default: synth.image_size].
    #[arg(long)]
    pub size: Option<usize>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = config::RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
        Command::Synth(a) => commands::synth(cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Predict(a) => commands::predict(a),
        Command::Score(a) => commands::score(a),
        Command::Render(a) => commands::render(a),
        Command::Decode(a) => commands::decode(a),
        Command::AugmentPreview(a) => commands::augment_preview(cfg, a),
        Command::Summary(a) => commands::summary(cfg, a),
    }
}
