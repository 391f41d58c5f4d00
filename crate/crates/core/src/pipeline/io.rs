use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::expected_shapes;
use super::{
    EpochLog, Model, PipelineError, Result, Stage, TrainConfig, TransferManifest, UNetConfig,
};
use crate::tensor::{read_checkpoint, write_checkpoint};

/// JSON written next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSidecar {
    pub config: UNetConfig,
    pub stage: Stage,
    pub initialized_from_stage1: bool,
    pub epochs_trained: usize,
    pub train: Option<TrainConfig>,
    pub transfer: Option<TransferManifest>,
    pub history: Vec<EpochLog>,
}

impl ModelSidecar {
    pub fn for_model(model: &Model) -> Self {
        Self {
            config: model.config.clone(),
            stage: model.stage,
            initialized_from_stage1: model.initialized_from_stage1,
            epochs_trained: 0,
            train: None,
            transfer: None,
            history: Vec::new(),
        }
    }
}

/// `<checkpoint>.json`
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_model(path: &Path, model: &Model, sidecar: &ModelSidecar) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_checkpoint(path, &model.params)?;
    std::fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(sidecar)? + "\n",
    )?;
    Ok(())
}

/// Loads a checkpoint and its sidecar, checking every tensor name and shape
/// against the configured architecture.
pub fn load_model(path: &Path) -> Result<(Model, ModelSidecar)> {
    let sidecar: ModelSidecar =
        serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    sidecar.config.validate()?;
    let params = read_checkpoint(path)?;
    let expected = expected_shapes(&sidecar.config, sidecar.stage);
    for (name, shape) in &expected {
        let t = params
            .get(name)
            .ok_or_else(|| PipelineError::MissingParam(name.clone()))?;
        if t.shape() != shape.as_slice() {
            return Err(PipelineError::ParamShape {
                name: name.clone(),
                expected: shape.clone(),
                found: t.shape().to_vec(),
            });
        }
    }
    let known: BTreeSet<&str> = expected.iter().map(|(n, _)| n.as_str()).collect();
    if let Some(extra) = params.names().find(|n| !known.contains(n)) {
        return Err(PipelineError::UnexpectedParam(extra.to_string()));
    }
    let model = Model {
        config: sidecar.config.clone(),
        stage: sidecar.stage,
        params,
        initialized_from_stage1: sidecar.initialized_from_stage1,
    };
    Ok((model, sidecar))
}
