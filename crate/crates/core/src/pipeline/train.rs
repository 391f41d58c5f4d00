use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{predict, Model, PipelineError, Result, Stage, TrainConfig};
use crate::cutmix::{augment_batch, donor_indices};
use crate::data::{crop_and_augment, DamageMask, SamplePair};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::par;
use crate::tensor::{AdamConfig, AdamState, Tensor};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-sample training loss.
    pub loss: f64,
    pub lr: f64,
    /// Held-out scores after the epoch, when a held-out split was given.
    pub metrics: Option<MetricsReport>,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("serializable log")
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochLog>,
}

const SHUFFLE: u64 = 1;
const AUGMENT: u64 = 2;
const CUTMIX: u64 = 3;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng_for(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(purpose)));
    rng.set_stream(index);
    rng
}

/// Pooled held-out scores. Stage 1 is scored on building-vs-background masks.
pub fn evaluate(model: &Model, pairs: &[SamplePair], crop: usize) -> Result<MetricsReport> {
    let preds = par::try_map_indexed(pairs.len(), |i| {
        let p = &pairs[i];
        match model.stage {
            Stage::One => predict(model, &p.pre, None, crop, 0),
            Stage::Two => predict(model, &p.pre, Some(&p.post), crop, 0),
        }
    })?;
    let mut cm = ConfusionMatrix::new();
    for (p, pred) in pairs.iter().zip(&preds) {
        let truth: DamageMask = match model.stage {
            Stage::One => p.mask.to_building(),
            Stage::Two => p.mask.clone(),
        };
        cm.accumulate(&truth, pred)?;
    }
    Ok(MetricsReport::from_confusion(cm))
}

fn accumulate(acc: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>) {
    for (name, g) in grads {
        match acc.get_mut(&name) {
            Some(a) => a
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(x, y)| *x += y),
            None => {
                acc.insert(name, g);
            }
        }
    }
}

/// Mini-batch Adam on per-pixel cross-entropy.
///
/// Each epoch shuffles the training tiles, takes a random crop with flips and
/// quarter turns, applies CutMix to stage-2 batches when configured, averages
/// per-sample gradients in batch order and takes one Adam step per batch.
/// After every epoch the model is scored on `holdout` and `on_epoch` receives
/// the log line. Results depend only on the inputs and `config.seed`.
pub fn train(
    model: &mut Model,
    train_set: &[SamplePair],
    holdout: &[SamplePair],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    config.validate(&model.config)?;
    if train_set.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    if model.stage != config.stage {
        return Err(PipelineError::Config(format!(
            "model is stage {} but training config is stage {}",
            model.stage, config.stage
        )));
    }
    if model.stage == Stage::Two && !model.initialized_from_stage1 {
        return Err(PipelineError::Config(
            "stage-2 training must start from transferred stage-1 weights".into(),
        ));
    }

    let donors: Vec<SamplePair> = match &config.cutmix {
        Some(policy) => donor_indices(train_set, policy)
            .into_iter()
            .map(|i| train_set[i].clone())
            .collect(),
        None => Vec::new(),
    };
    let mut adam = AdamState::new(AdamConfig::with_lr(config.learning_rate));
    let mut report = TrainReport::default();
    let n = train_set.len();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(config.seed, SHUFFLE, epoch as u64));
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut batch = Vec::with_capacity(chunk.len());
            for (j, &idx) in chunk.iter().enumerate() {
                let stream = ((epoch as u64) << 32) | (bi * config.batch_size + j) as u64;
                let mut rng = rng_for(config.seed, AUGMENT, stream);
                batch.push(crop_and_augment(
                    &train_set[idx],
                    config.crop_size,
                    config.basic_aug,
                    &mut rng,
                )?);
            }
            if let Some(policy) = &config.cutmix {
                let batch_seed = splitmix(config.seed ^ policy.seed ^ splitmix(CUTMIX))
                    ^ (((epoch as u64) << 32) | bi as u64);
                batch = augment_batch(&batch, &donors, policy, batch_seed)?;
            }

            let results = par::try_map_indexed(batch.len(), |i| model.loss_and_grads(&batch[i]))?;
            let mut grads = BTreeMap::new();
            let mut batch_loss = 0.0;
            for (loss, g) in results {
                if !loss.is_finite() {
                    return Err(PipelineError::NanLoss {
                        epoch,
                        batch: bi,
                        ids: batch.iter().map(|s| s.id.clone()).collect(),
                    });
                }
                batch_loss += loss;
                accumulate(&mut grads, g);
            }
            let scale = 1.0 / batch.len() as f32;
            for g in grads.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            loss_sum += batch_loss;
            model.params.set_grads(grads)?;
            adam.step(&mut model.params)?;
        }

        let metrics = if holdout.is_empty() {
            None
        } else {
            Some(evaluate(model, holdout, config.crop_size)?)
        };
        let line = EpochLog {
            epoch,
            loss: loss_sum / n as f64,
            lr: config.learning_rate,
            metrics,
        };
        log::info!("epoch {epoch}: loss {:.5}", line.loss);
        on_epoch(&line);
        report.history.push(line);
    }
    Ok(report)
}
