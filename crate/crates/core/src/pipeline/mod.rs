//! Two-stage building damage pipeline.
//!
//! Stage 1 segments buildings from the pre-disaster image with a single U-Net.
//! Stage 2 runs the pre- and post-disaster images through the same U-Net
//! weights, fuses the two branches with CDF blocks at the bottleneck and at
//! every skip level, and decodes the fused post-branch stream into five
//! classes. Stage 2 starts from the stage-1 weights.

mod infer;
mod io;
mod model;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cutmix::CutMixPolicy;
use crate::data::{AugFlags, DataError};
use crate::tensor::{CheckpointError, TensorError};

pub use infer::{predict, tile_starts};
pub use io::{load_model, save_model, sidecar_path, ModelSidecar};
pub use model::{
    build_model, count_macs, decode, encode, expected_shapes, forward_stage1, forward_stage2,
    transfer_stage1_weights, Encoded, Model, ModelSummary, Stage2Trace, TransferManifest,
};
pub use train::{evaluate, train, EpochLog, TrainReport};

/// Output classes of the stage-1 head (background, building).
pub const STAGE1_CLASSES: usize = 2;
/// Output classes of the stage-2 head (background plus four damage levels).
pub const STAGE2_CLASSES: usize = 5;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("configuration: {0}")]
    Config(String),
    #[error(
        "input {height}x{width} is not divisible by {multiple}; pad by {pad_h} rows and {pad_w} columns"
    )]
    InputSize {
        height: usize,
        width: usize,
        multiple: usize,
        pad_h: usize,
        pad_w: usize,
    },
    #[error("expected {expected} input channels, got {found}")]
    Channels { expected: usize, found: usize },
    #[error("non-finite loss in epoch {epoch}, batch {batch} (samples {ids:?})")]
    NanLoss {
        epoch: usize,
        batch: usize,
        ids: Vec<String>,
    },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter {0} missing from checkpoint")]
    MissingParam(String),
    #[error("unexpected parameter {0} in checkpoint")]
    UnexpectedParam(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    /// Building segmentation from the pre-disaster image.
    One,
    /// Damage classification from the pre/post pair.
    Two,
}

impl Stage {
    pub fn num_classes(self) -> usize {
        match self {
            Stage::One => STAGE1_CLASSES,
            Stage::Two => STAGE2_CLASSES,
        }
    }
}

impl TryFrom<u8> for Stage {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(format!("stage must be 1 or 2, got {v}")),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Number of 2×2 poolings; the bottleneck sits at level `depth`.
    pub depth: usize,
    /// Channels at level 0, doubled per level.
    pub base_channels: usize,
    /// Levels carrying a CDF block in stage 2. Levels `0..depth` fuse the skip
    /// pair, level `depth` fuses the bottleneck. `None` means all of them.
    pub fusion_levels: Option<Vec<usize>>,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            depth: 3,
            base_channels: 16,
            fusion_levels: None,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 8 {
            return Err(PipelineError::Config(format!(
                "depth {} outside 1..=8",
                self.depth
            )));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(PipelineError::Config(
                "base_channels and in_channels must be positive".into(),
            ));
        }
        if let Some(levels) = &self.fusion_levels {
            if let Some(l) = levels.iter().find(|&&l| l > self.depth) {
                return Err(PipelineError::Config(format!(
                    "fusion level {l} exceeds depth {}",
                    self.depth
                )));
            }
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Sorted, deduplicated fusion levels.
    pub fn fusion_levels(&self) -> Vec<usize> {
        let mut v = match &self.fusion_levels {
            Some(l) => l.clone(),
            None => (0..=self.depth).collect(),
        };
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn check_size(&self, height: usize, width: usize) -> Result<()> {
        let m = self.size_multiple();
        if height == 0 || width == 0 || !height.is_multiple_of(m) || !width.is_multiple_of(m) {
            return Err(PipelineError::InputSize {
                height,
                width,
                multiple: m,
                pad_h: (m - height % m) % m,
                pad_w: (m - width % m) % m,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub seed: u64,
    /// Stage 2 only.
    pub cutmix: Option<CutMixPolicy>,
    pub basic_aug: AugFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(Stage::One)
    }
}

impl TrainConfig {
    /// Small-scale defaults for synthetic 64×64 tiles.
    pub fn desk(stage: Stage) -> Self {
        let (learning_rate, epochs, cutmix) = match stage {
            Stage::One => (1.5e-4, 30, None),
            Stage::Two => (2e-4, 10, Some(CutMixPolicy::default())),
        };
        Self {
            stage,
            learning_rate,
            epochs,
            batch_size: 8,
            crop_size: 64,
            seed: 0,
            cutmix,
            basic_aug: AugFlags::default(),
        }
    }

    /// Learning rates, epoch counts and crop size used for full-scale xBD.
    pub fn full_scale(stage: Stage) -> Self {
        let (learning_rate, epochs) = match stage {
            Stage::One => (1.5e-4, 120),
            Stage::Two => (2e-4, 20),
        };
        Self {
            learning_rate,
            epochs,
            crop_size: 512,
            ..Self::desk(stage)
        }
    }

    pub fn validate(&self, model: &UNetConfig) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate {} must be finite and >= 0",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !self.crop_size.is_multiple_of(model.size_multiple()) || self.crop_size == 0 {
            return bad(format!(
                "crop size {} must be a positive multiple of {}",
                self.crop_size,
                model.size_multiple()
            ));
        }
        match (&self.cutmix, self.stage) {
            (Some(_), Stage::One) => bad("cutmix applies to stage 2 only".into()),
            (Some(p), Stage::Two) => Ok(p.validate()?),
            (None, _) => Ok(()),
        }
    }
}
