//! Declarative run configuration (TOML). Every section and field is optional;
//! command-line flags override file values, which override the defaults.
//!
//! ```toml
//! [model]                  # U-Net shape
//! in_channels = 3
//! depth = 3                # poolings; inputs must be multiples of 2^depth
//! base_channels = 16       # doubled per level
//! # fusion_levels = [0, 1, 2, 3]   # default: every skip level and the bottleneck
//!
//! [train]
//! preset = "desk"          # "desk" (64 px crops) or "full" (512 px crops, 120/20 epochs)
//! # learning_rate, epochs, batch_size, crop_size override the preset
//! seed = 0
//! holdout_fraction = 0.2   # trailing share of the sorted pair ids scored after each epoch
//! cutmix = true            # stage 2 only; policy in [cutmix]
//! basic_aug = { flip = true, rotate = true }
//!
//! [cutmix]
//! target_classes = [2, 3]
//! probability = 0.5
//! box_fraction_range = [0.2, 0.5]
//! min_hard_fraction = 0.01
//! seed = 0
//!
//! [synth]
//! num_pairs = 50
//! image_size = 64
//! buildings_min = 2
//! buildings_max = 6
//! building_side_min = 6
//! building_side_max = 16
//! # damage_distribution = [no, minor, major, destroyed], default: xBD pixel shares
//! #   (about 0.761, 0.090, 0.073, 0.077)
//! seed = 0
//!
//! [paths]
//! data = "data"            # dataset root for train, predict and augment-preview
//! runs = "runs"            # default checkpoint directory
//! ```

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use damage_core::cutmix::CutMixPolicy;
use damage_core::data::{AugFlags, SynthConfig};
use damage_core::pipeline::{Stage, TrainConfig, UNetConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Synthetic-scale crops and epoch counts.
    #[default]
    Desk,
    /// Full-scale xBD values: lr 0.00015/0.0002, epochs 120/20, crop 512.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub preset: Preset,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crop_size: Option<usize>,
    pub seed: u64,
    pub holdout_fraction: f64,
    pub cutmix: bool,
    pub basic_aug: AugFlags,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            preset: Preset::Desk,
            learning_rate: None,
            epochs: None,
            batch_size: None,
            crop_size: None,
            seed: 0,
            holdout_fraction: 0.2,
            cutmix: true,
            basic_aug: AugFlags::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: PathBuf,
    pub runs: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data"),
            runs: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: UNetConfig,
    pub train: TrainSection,
    pub cutmix: CutMixPolicy,
    pub synth: SynthConfig,
    pub paths: Paths,
}

impl RunConfig {
    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Preset for `stage` with the `[train]` overrides and, for stage 2, the
    /// `[cutmix]` policy applied.
    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        let t = &self.train;
        let base = match t.preset {
            Preset::Desk => TrainConfig::desk(stage),
            Preset::Full => TrainConfig::full_scale(stage),
        };
        TrainConfig {
            stage,
            learning_rate: t.learning_rate.unwrap_or(base.learning_rate),
            epochs: t.epochs.unwrap_or(base.epochs),
            batch_size: t.batch_size.unwrap_or(base.batch_size),
            crop_size: t.crop_size.unwrap_or(base.crop_size),
            seed: t.seed,
            cutmix: (stage == Stage::Two && t.cutmix).then(|| self.cutmix.clone()),
            basic_aug: t.basic_aug,
        }
    }
}
