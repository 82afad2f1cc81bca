//! Mini-batch training loop shared by centralized runs and agent-local training.

use serde::{Deserialize, Serialize};

use crate::dataset::{make_batch, ProcessedSignature};
use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use crate::optim::{make_batches, Optimizer, OptimizerKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
}

impl TrainConfig {
    /// Adamax with learning rate 0.01, 200 epochs, batch size 160.
    pub fn centralized() -> Self {
        Self {
            epochs: 200,
            batch_size: 160,
            lr: 0.01,
            optimizer: OptimizerKind::Adamax,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::centralized()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Sample-weighted mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Runs `cfg.epochs` epochs over `data` starting from a copy of `params`.
///
/// Batch order comes from `make_batches(seed, epoch)`. Batch-norm running
/// statistics are carried forward from every training batch.
pub fn train(params: &ModelParams, data: &[ProcessedSignature], cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", cfg.lr)));
    }
    let mut params = params.clone();
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.lr, &params);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for indices in make_batches(data.len(), cfg.batch_size, seed, epoch as u64)? {
            let batch = make_batch(data, &indices)?;
            let step = model::loss_and_gradients(&params, &batch)?;
            optimizer.step(&mut params, &step.grads)?;
            params.set_running_stats(&step.running_stats)?;
            total += step.loss * batch.len() as f64;
        }
        epoch_losses.push(total / data.len() as f64);
    }
    if !params.is_finite() {
        return Err(Error::Config("training diverged to non-finite parameters".into()));
    }
    Ok(TrainOutcome { params, epoch_losses })
}
