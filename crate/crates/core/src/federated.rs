//! FederatedAveraging over in-process agents.
//!
//! The coordinator holds the global parameters. Each iteration every agent
//! trains a copy on its own partition and hands back only a
//! [`Contribution`], i.e. parameters plus its training-set size. The
//! coordinator replaces the global model with the size-weighted mean of all
//! contributions. Agents run concurrently; their random streams derive from
//! `(master seed, agent, iteration)` so the outcome does not depend on
//! scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ProcessedSignature;
use crate::error::{Error, Result};
use crate::metrics::{roc_and_eer, score_batch};
use crate::model::{ModelConfig, ModelParams};
use crate::optim::OptimizerKind;
use crate::seed::derive_seed;
use crate::tensor::Tensor;
use crate::train::{train, TrainConfig};

const INIT_STREAM: u64 = 0x1A17;
const LOCAL_STREAM: u64 = 0x10CA;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    pub agents: usize,
    pub local_epochs: usize,
    pub iterations: usize,
    pub local_batch_size: usize,
    pub lr: f64,
    pub local_optimizer: OptimizerKind,
    /// Size of the pretraining corpus relative to all agent data.
    pub init_ratio: f64,
    /// Centralized recipe used to pretrain the global model when `init_ratio > 0`.
    pub init_training: TrainConfig,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            agents: 2,
            local_epochs: 15,
            iterations: 200,
            local_batch_size: 32,
            lr: 0.001,
            local_optimizer: OptimizerKind::Sgd,
            init_ratio: 0.0,
            init_training: TrainConfig::centralized(),
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.agents == 0 {
            return Err(Error::Config("agents must be at least 1".into()));
        }
        if self.local_batch_size == 0 {
            return Err(Error::Config("local_batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.init_ratio) {
            return Err(Error::Config(format!("init_ratio must be in [0, 1], got {}", self.init_ratio)));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        self.model.validate()
    }

    pub fn local_plan(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.local_epochs,
            batch_size: self.local_batch_size,
            lr: self.lr,
            optimizer: self.local_optimizer,
        }
    }
}

/// What an agent returns to the coordinator: parameters and a sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct Contribution {
    pub params: ModelParams,
    pub size: usize,
}

/// An edge participant and its private training partition.
#[derive(Debug, Clone)]
pub struct Agent {
    index: usize,
    data: Vec<ProcessedSignature>,
}

impl Agent {
    pub fn new(index: usize, data: Vec<ProcessedSignature>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Federated(format!("agent {index} has no training data")));
        }
        Ok(Self { index, data })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn size(&self) -> usize {
        self.data.len()
    }

    /// Local training as seen by the coordinator: global parameters in,
    /// a contribution out.
    pub fn train_round(&self, global: &ModelParams, plan: &TrainConfig, seed: u64) -> Result<(Contribution, Vec<f64>)> {
        let outcome = train(global, &self.data, plan, seed)?;
        Ok((
            Contribution {
                params: outcome.params,
                size: self.size(),
            },
            outcome.epoch_losses,
        ))
    }
}

/// Runs `epochs` local epochs of mini-batch SGD on a copy of `global`.
pub fn local_training(
    agent: &Agent,
    global: &ModelParams,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<ModelParams> {
    let plan = TrainConfig {
        epochs,
        batch_size,
        lr,
        optimizer: OptimizerKind::Sgd,
    };
    Ok(agent.train_round(global, &plan, seed)?.0.params)
}

/// Size-weighted mean of every tensor, running statistics included.
///
/// Each element is computed as `min + sum_k (size_k / total) * (w_k - min)`
/// with the terms summed in sorted order, so the result does not depend on
/// contribution order and equals the shared value exactly when all
/// contributions agree.
pub fn aggregate(contributions: &[Contribution]) -> Result<ModelParams> {
    let first = contributions
        .first()
        .ok_or_else(|| Error::Federated("no contributions to aggregate".into()))?;
    let config = first.params.config();
    for c in contributions {
        if c.size == 0 {
            return Err(Error::Federated("contribution with zero samples".into()));
        }
        if c.params.config() != config {
            return Err(Error::Shape("contributions come from different model configs".into()));
        }
    }
    let total: usize = contributions.iter().map(|c| c.size).sum();
    let weights: Vec<f64> = contributions.iter().map(|c| c.size as f64 / total as f64).collect();

    let mut terms = vec![0.0; contributions.len()];
    let tensors = first
        .params
        .tensors()
        .iter()
        .enumerate()
        .map(|(t, shape_src)| {
            let data = (0..shape_src.len())
                .map(|e| {
                    let floor = contributions
                        .iter()
                        .map(|c| c.params.tensors()[t].data()[e])
                        .fold(f64::INFINITY, f64::min);
                    for ((term, c), w) in terms.iter_mut().zip(contributions).zip(&weights) {
                        *term = w * (c.params.tensors()[t].data()[e] - floor);
                    }
                    terms.sort_by(f64::total_cmp);
                    floor + terms.iter().sum::<f64>()
                })
                .collect();
            Tensor::new(shape_src.shape().to_vec(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    ModelParams::from_tensors(config, tensors)
}

/// Initial global model: a fresh seeded model when `init_ratio` is 0,
/// otherwise that model pretrained centrally on `init_data`.
pub fn init_global(init_data: Option<&[ProcessedSignature]>, cfg: &FedConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let fresh = ModelParams::init(&cfg.model)?;
    if cfg.init_ratio == 0.0 {
        return Ok(fresh);
    }
    let data = init_data
        .filter(|d| !d.is_empty())
        .ok_or_else(|| Error::Federated("init_ratio > 0 needs a non-empty initialization corpus".into()))?;
    Ok(train(&fresh, data, &cfg.init_training, derive_seed(cfg.seed, &[INIT_STREAM]))?.params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based.
    pub iteration: usize,
    /// Per agent, the mean training loss of each local epoch.
    pub agent_losses: Vec<Vec<f64>>,
    /// Size-weighted mean of the agents' last-epoch losses.
    pub train_loss: f64,
    /// Test metrics of the post-aggregation model, when a test set was given.
    pub eer: Option<f64>,
    pub accuracy: Option<f64>,
    /// Where the harness stored this iteration's global model, if it did.
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FedHistory {
    pub records: Vec<IterationRecord>,
}

#[derive(Debug, Clone)]
pub struct FedRun {
    pub initial: ModelParams,
    pub history: FedHistory,
    pub final_params: ModelParams,
}

pub fn run_federated(
    cfg: &FedConfig,
    agents: &[Agent],
    init_data: Option<&[ProcessedSignature]>,
    test: &[ProcessedSignature],
) -> Result<FedRun> {
    run_federated_with(cfg, agents, init_data, test, |_, _| Ok(None))
}

/// Like [`run_federated`], calling `observe(iteration, global)` after each
/// aggregation. A returned string is stored as the iteration's checkpoint.
pub fn run_federated_with<F>(
    cfg: &FedConfig,
    agents: &[Agent],
    init_data: Option<&[ProcessedSignature]>,
    test: &[ProcessedSignature],
    mut observe: F,
) -> Result<FedRun>
where
    F: FnMut(usize, &ModelParams) -> Result<Option<String>>,
{
    cfg.validate()?;
    if agents.len() != cfg.agents {
        return Err(Error::Federated(format!(
            "config expects {} agents, got {}",
            cfg.agents,
            agents.len()
        )));
    }
    let initial = init_global(init_data, cfg)?;
    let plan = cfg.local_plan();
    let mut global = initial.clone();
    let mut history = FedHistory::default();

    for iteration in 1..=cfg.iterations {
        let results = agents
            .par_iter()
            .map(|agent| {
                let seed = derive_seed(cfg.seed, &[LOCAL_STREAM, agent.index() as u64, iteration as u64]);
                agent.train_round(&global, &plan, seed)
            })
            .collect::<Result<Vec<_>>>()?;
        let (contributions, agent_losses): (Vec<Contribution>, Vec<Vec<f64>>) = results.into_iter().unzip();
        global = aggregate(&contributions)?;

        let total: usize = contributions.iter().map(|c| c.size).sum();
        let train_loss = contributions
            .iter()
            .zip(&agent_losses)
            .map(|(c, l)| l.last().copied().unwrap_or(f64::NAN) * c.size as f64)
            .sum::<f64>()
            / total as f64;
        let (eer, accuracy) = if test.is_empty() {
            (None, None)
        } else {
            let roc = roc_and_eer(&score_batch(&global, test)?)?;
            (Some(roc.eer), Some(roc.accuracy_at_half))
        };
        let checkpoint = observe(iteration, &global)?;
        history.records.push(IterationRecord {
            iteration,
            agent_losses,
            train_loss,
            eer,
            accuracy,
            checkpoint,
        });
    }
    Ok(FedRun {
        initial,
        history,
        final_params: global,
    })
}
