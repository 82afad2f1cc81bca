//! The five experiment kinds and the files they leave in `cfg.out`.
//!
//! Every (sweep value, instance) pair is an independent job. Data roles,
//! train/test splits and agent partitions depend only on the master seed and
//! the instance, so all sweep values of one instance see the same data and
//! the same initial model seed; only the swept quantity changes.

use std::path::{Path, PathBuf};

use fedsig_core::checkpoint;
use fedsig_core::dataset::{
    load_corpus, partition_agents, preprocess_all, split_train_test, synth_generate, Corpus, CorpusManifest,
    ProcessedSignature, Provenance,
};
use fedsig_core::federated::{run_federated_with, Agent, FedConfig, FedHistory};
use fedsig_core::metrics::{roc_and_eer, score_batch, summarize_instances, InstanceSummary, RocCurve, ScoreSet};
use fedsig_core::model::{ModelConfig, ModelParams};
use fedsig_core::seed::{derive_seed, rng_for};
use fedsig_core::train::train;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{DataSource, ExperimentConfig, ExperimentKind, FedParams, RunMode};
use crate::error::{HarnessError, Result};
use crate::output::{write_atomic, write_json, write_with, VERSION};

const ROLE_STREAM: u64 = 0x201E;
const SPLIT_STREAM: u64 = 0x5B17;
const PARTITION_STREAM: u64 = 0x9A27;
const INIT_PICK_STREAM: u64 = 0x1B1C;
const RUN_STREAM: u64 = 0x2C0F;

pub struct LoadedData {
    pub corpus: Corpus,
    pub manifest: CorpusManifest,
}

pub fn load_data(source: &DataSource) -> Result<LoadedData> {
    let (corpus, warnings) = match source {
        DataSource::Synthetic(s) => (synth_generate(s)?, Vec::new()),
        DataSource::Svc { task1, task2 } => {
            let mut warnings = Vec::new();
            let mut corpus: Option<Corpus> = None;
            for (task, dir) in [(1u8, task1), (2, task2)] {
                if let Some(dir) = dir {
                    let loaded = load_corpus(dir, task)?;
                    warnings.extend(loaded.warnings.into_iter().map(|w| format!("{}: {w}", dir.display())));
                    corpus = Some(match corpus {
                        Some(c) => c.merge(loaded.corpus),
                        None => loaded.corpus,
                    });
                }
            }
            let corpus = corpus.ok_or_else(|| HarnessError::Config("no SVC task directory given".into()))?;
            (corpus, warnings)
        }
    };
    let mut manifest = corpus.manifest();
    manifest.warnings = warnings;
    Ok(LoadedData { corpus, manifest })
}

/// Who does what in one instance: pretraining pool, agent users, test set.
struct Roles {
    init_pool: Vec<ProcessedSignature>,
    agent_train: Corpus,
    test: Vec<ProcessedSignature>,
}

fn assign_roles(corpus: &Corpus, cfg: &ExperimentConfig, init_users: usize, instance: u64) -> Result<Roles> {
    let mut users = corpus.users();
    if init_users >= users.len() {
        return Err(HarnessError::Config(format!(
            "init_users = {init_users} leaves no users for training out of {}",
            users.len()
        )));
    }
    users.shuffle(&mut rng_for(cfg.seed, &[ROLE_STREAM, instance]));
    let (pool, rest) = users.split_at(init_users);
    let (train_split, test_split) =
        split_train_test(corpus, cfg.train_per_class, derive_seed(cfg.seed, &[SPLIT_STREAM, instance]))?;
    let max_length = cfg.model.max_length;
    Ok(Roles {
        init_pool: preprocess_all(&train_split.select_users(pool), max_length)?,
        agent_train: train_split.select_users(rest),
        test: preprocess_all(&test_split.select_users(rest), max_length)?,
    })
}

fn instance_model(cfg: &ExperimentConfig, model: &ModelConfig, instance: u64) -> ModelConfig {
    ModelConfig {
        seed: derive_seed(cfg.seed, &[RUN_STREAM, instance]),
        ..model.clone()
    }
}

pub struct RunOutcome {
    pub roc: RocCurve,
    pub scores: ScoreSet,
    pub params: ModelParams,
    /// Centralized runs: one entry per epoch.
    pub epoch_losses: Vec<f64>,
    /// Federated runs only.
    pub history: Option<FedHistory>,
    /// Realized size of the pretraining set, federated runs only.
    pub init_samples: usize,
    pub agent_samples: Vec<usize>,
}

fn evaluate(params: &ModelParams, test: &[ProcessedSignature]) -> Result<(RocCurve, ScoreSet)> {
    let scores = score_batch(params, test)?;
    Ok((roc_and_eer(&scores)?, scores))
}

pub fn run_centralized(cfg: &ExperimentConfig, corpus: &Corpus, model: &ModelConfig, instance: u64) -> Result<RunOutcome> {
    let roles = assign_roles(corpus, cfg, 0, instance)?;
    let model = instance_model(cfg, model, instance);
    let data = preprocess_all(&roles.agent_train, model.max_length)?;
    let start = ModelParams::init(&model)?;
    let outcome = train(&start, &data, &cfg.centralized, derive_seed(model.seed, &[1]))?;
    let (roc, scores) = evaluate(&outcome.params, &roles.test)?;
    Ok(RunOutcome {
        roc,
        scores,
        params: outcome.params,
        epoch_losses: outcome.epoch_losses,
        history: None,
        init_samples: 0,
        agent_samples: vec![data.len()],
    })
}

fn pick_init(pool: &[ProcessedSignature], ratio: Option<f64>, agent_total: usize, seed: u64) -> Result<Vec<ProcessedSignature>> {
    let Some(r) = ratio else {
        return Ok(pool.to_vec());
    };
    let wanted = (r * agent_total as f64).round() as usize;
    if wanted > pool.len() {
        return Err(HarnessError::Config(format!(
            "init_ratio {r} needs {wanted} pretraining samples but the init users only have {}",
            pool.len()
        )));
    }
    let mut picked = pool.to_vec();
    picked.shuffle(&mut rng_for(seed, &[]));
    picked.truncate(wanted);
    Ok(picked)
}

/// Callback for every post-aggregation global model; a returned string is
/// recorded in the history as that iteration's checkpoint.
pub type Observer<'a> = dyn FnMut(usize, &ModelParams) -> fedsig_core::Result<Option<String>> + 'a;

pub fn run_federated_instance(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    fed: &FedParams,
    init_users: usize,
    init_ratio: Option<f64>,
    instance: u64,
    observe: &mut Observer<'_>,
) -> Result<RunOutcome> {
    let roles = assign_roles(corpus, cfg, init_users, instance)?;
    let model = instance_model(cfg, &cfg.model, instance);
    let parts = partition_agents(&roles.agent_train, fed.agents, derive_seed(cfg.seed, &[PARTITION_STREAM, instance]))?;
    let agents = parts
        .iter()
        .enumerate()
        .map(|(k, part)| Ok(Agent::new(k, preprocess_all(part, model.max_length)?)?))
        .collect::<Result<Vec<_>>>()?;
    let agent_samples: Vec<usize> = agents.iter().map(Agent::size).collect();
    let agent_total: usize = agent_samples.iter().sum();
    let init = pick_init(&roles.init_pool, init_ratio, agent_total, derive_seed(cfg.seed, &[INIT_PICK_STREAM, instance]))?;
    let realized = init.len() as f64 / agent_total as f64;
    if realized > 1.0 {
        return Err(HarnessError::Config(format!(
            "pretraining set ({} samples) is larger than the agent data ({agent_total}); set init_ratio",
            init.len()
        )));
    }
    let fed_cfg = FedConfig {
        agents: fed.agents,
        local_epochs: fed.local_epochs,
        iterations: fed.iterations,
        local_batch_size: fed.local_batch_size,
        lr: fed.lr,
        local_optimizer: fed.local_optimizer,
        init_ratio: realized,
        init_training: cfg.centralized.clone(),
        seed: model.seed,
        model,
    };
    let run = run_federated_with(&fed_cfg, &agents, Some(&init), &roles.test, |i, p| observe(i, p))?;
    let (roc, scores) = evaluate(&run.final_params, &roles.test)?;
    Ok(RunOutcome {
        roc,
        scores,
        params: run.final_params,
        epoch_losses: Vec::new(),
        history: Some(run.history),
        init_samples: init.len(),
        agent_samples,
    })
}

#[derive(Debug, Serialize)]
pub struct CorpusInfo {
    pub provenance: Vec<Provenance>,
    pub users: usize,
    pub signatures: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct Summary<'a, R: Serialize> {
    pub version: &'static str,
    pub kind: ExperimentKind,
    pub config: &'a ExperimentConfig,
    pub corpus: CorpusInfo,
    #[serde(flatten)]
    pub results: R,
}

#[derive(Debug, Serialize)]
pub struct SweepEntry {
    pub value: f64,
    pub eer: InstanceSummary,
    pub accuracy: InstanceSummary,
    pub accuracy_at_eer: InstanceSummary,
    /// Instance whose EER is the median; its ROC is written out.
    pub median_instance: usize,
}

#[derive(Debug, Serialize)]
pub struct SweepResults {
    pub swept: &'static str,
    pub entries: Vec<SweepEntry>,
    /// Sweep value with the lowest median EER.
    pub best_eer_value: f64,
    /// Sweep value with the highest median accuracy.
    pub best_accuracy_value: f64,
}

#[derive(Debug, Serialize)]
pub struct SingleResults {
    pub mode: RunMode,
    pub eer: f64,
    pub accuracy: f64,
    pub accuracy_at_eer: f64,
    pub eer_threshold: f64,
    pub test_samples: usize,
    pub train_samples: Vec<usize>,
    pub init_samples: usize,
    pub checkpoint: String,
}

/// Runs `cfg.kind`, writes its result files and returns the summary path.
pub fn run(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let data = load_data(&cfg.data)?;
    write_json(&cfg.out.join("corpus_manifest.json"), &data.manifest)?;
    let corpus = CorpusInfo {
        provenance: data.manifest.provenance.clone(),
        users: data.manifest.users.len(),
        signatures: data.manifest.total,
        warnings: data.manifest.warnings.clone(),
    };
    let summary_path = cfg.out.join("summary.json");
    match cfg.kind {
        ExperimentKind::SingleRun => {
            let results = run_single(cfg, &data.corpus)?;
            write_json(&summary_path, &summary(cfg, corpus, results))?;
        }
        _ => {
            let results = run_sweep(cfg, &data.corpus)?;
            write_json(&summary_path, &summary(cfg, corpus, results))?;
        }
    }
    Ok(summary_path)
}

fn summary<R: Serialize>(cfg: &ExperimentConfig, corpus: CorpusInfo, results: R) -> Summary<'_, R> {
    Summary {
        version: VERSION,
        kind: cfg.kind,
        config: cfg,
        corpus,
        results,
    }
}

fn value_tag(name: &str, v: f64) -> String {
    format!("{name}_{v}")
}

struct JobResult {
    value_index: usize,
    instance: usize,
    outcome: RunOutcome,
}

fn run_job(cfg: &ExperimentConfig, corpus: &Corpus, value: f64, instance: usize) -> Result<RunOutcome> {
    let inst = instance as u64;
    let mut no_checkpoints = |_: usize, _: &ModelParams| Ok(None);
    match cfg.kind {
        ExperimentKind::CentralizedKernelSweep => {
            let model = ModelConfig {
                kernel_size: value as usize,
                ..cfg.model.clone()
            };
            run_centralized(cfg, corpus, &model, inst)
        }
        ExperimentKind::FlLocalEpochs => {
            let fed = FedParams {
                local_epochs: value as usize,
                ..cfg.federated.clone()
            };
            run_federated_instance(cfg, corpus, &fed, cfg.init_users, cfg.init_ratio, inst, &mut no_checkpoints)
        }
        ExperimentKind::FlInitRatio => {
            run_federated_instance(cfg, corpus, &cfg.federated, cfg.init_users, Some(value), inst, &mut no_checkpoints)
        }
        ExperimentKind::FlScalability => {
            let fed = FedParams {
                agents: value as usize,
                ..cfg.federated.clone()
            };
            run_federated_instance(cfg, corpus, &fed, cfg.init_users, cfg.init_ratio, inst, &mut no_checkpoints)
        }
        ExperimentKind::SingleRun => unreachable!("single runs are not swept"),
    }
}

fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_with(path, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush().map_err(|e| HarnessError::io(path, e))?;
        Ok(())
    })
}

fn run_sweep(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<SweepResults> {
    let name = cfg.kind.sweep_name().expect("sweep kinds have a swept quantity");
    let out = &cfg.out;
    let jobs: Vec<(usize, usize)> = (0..cfg.sweep.len())
        .flat_map(|v| (0..cfg.instances).map(move |i| (v, i)))
        .collect();
    let mut results = jobs
        .par_iter()
        .map(|&(value_index, instance)| {
            let value = cfg.sweep[value_index];
            let outcome = run_job(cfg, corpus, value, instance)?;
            let tag = format!("{}_instance_{instance}", value_tag(name, value));
            log::info!(
                "{} {name}={value} instance {instance}: eer {:.4} accuracy {:.4}",
                cfg.kind,
                outcome.roc.eer,
                outcome.roc.accuracy_at_half
            );
            write_with(&out.join("scores").join(format!("{tag}.csv")), |b| Ok(outcome.scores.write_csv(b)?))?;
            if let Some(h) = &outcome.history {
                write_json(&out.join("history").join(format!("{tag}.json")), h)?;
            }
            Ok(JobResult {
                value_index,
                instance,
                outcome,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    results.sort_by_key(|r| (r.value_index, r.instance));

    let fmt = |v: f64| format!("{v}");
    let first_col = if cfg.kind == ExperimentKind::CentralizedKernelSweep { "kernel_size" } else { "param_value" };
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| {
            vec![
                fmt(cfg.sweep[r.value_index]),
                r.instance.to_string(),
                fmt(r.outcome.roc.eer),
                fmt(r.outcome.roc.accuracy_at_half),
            ]
        })
        .collect();
    let table = if cfg.kind == ExperimentKind::CentralizedKernelSweep { "results.csv" } else { "boxplot.csv" };
    write_table(&out.join(table), &[first_col, "instance", "eer", "accuracy"], &rows)?;

    if cfg.kind != ExperimentKind::CentralizedKernelSweep {
        let mut curves = Vec::new();
        for r in &results {
            for rec in &r.outcome.history.as_ref().expect("federated runs keep a history").records {
                curves.push(vec![
                    fmt(cfg.sweep[r.value_index]),
                    r.instance.to_string(),
                    rec.iteration.to_string(),
                    fmt(rec.train_loss),
                    rec.eer.map(fmt).unwrap_or_default(),
                    rec.accuracy.map(fmt).unwrap_or_default(),
                ]);
            }
        }
        write_table(
            &out.join("loss_curves.csv"),
            &["param_value", "instance", "iteration", "train_loss", "eer", "accuracy"],
            &curves,
        )?;
    }

    let mut entries = Vec::new();
    for (vi, &value) in cfg.sweep.iter().enumerate() {
        let group: Vec<&JobResult> = results.iter().filter(|r| r.value_index == vi).collect();
        let collect = |f: fn(&RocCurve) -> f64| group.iter().map(|r| f(&r.outcome.roc)).collect::<Vec<_>>();
        let eer = summarize_instances(&collect(|c| c.eer))?;
        let median = group[eer.median_instance];
        write_with(&out.join("roc").join(format!("{}_median.csv", value_tag(name, value))), |b| {
            Ok(median.outcome.roc.write_csv(b)?)
        })?;
        entries.push(SweepEntry {
            value,
            eer,
            accuracy: summarize_instances(&collect(|c| c.accuracy_at_half))?,
            accuracy_at_eer: summarize_instances(&collect(|c| c.accuracy_at_eer))?,
            median_instance: median.instance,
        });
    }
    let best_by = |key: fn(&SweepEntry) -> f64| {
        entries
            .iter()
            .min_by(|a, b| key(a).total_cmp(&key(b)))
            .map(|e| e.value)
            .expect("sweep is not empty")
    };
    let best_eer_value = best_by(|e| e.eer.median);
    let best_accuracy_value = best_by(|e| -e.accuracy.median);
    log::info!("{}: lowest median EER at {name}={best_eer_value}", cfg.kind);
    Ok(SweepResults {
        swept: name,
        entries,
        best_eer_value,
        best_accuracy_value,
    })
}

fn run_single(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<SingleResults> {
    let out = &cfg.out;
    let outcome = match cfg.mode {
        RunMode::Centralized => {
            let outcome = run_centralized(cfg, corpus, &cfg.model, 0)?;
            let rows: Vec<Vec<String>> = outcome
                .epoch_losses
                .iter()
                .enumerate()
                .map(|(e, l)| vec![(e + 1).to_string(), format!("{l}")])
                .collect();
            write_table(&out.join("loss_curve.csv"), &["epoch", "train_loss"], &rows)?;
            outcome
        }
        RunMode::Federated => {
            let every = cfg.checkpoint_every;
            let mut save = |iteration: usize, params: &ModelParams| -> fedsig_core::Result<Option<String>> {
                if every == 0 || iteration % every != 0 {
                    return Ok(None);
                }
                let rel = format!("checkpoints/iteration_{iteration}.ckpt");
                write_atomic(&out.join(&rel), &checkpoint::encode(params))
                    .map_err(|e| fedsig_core::Error::Io(std::io::Error::other(e.to_string())))?;
                Ok(Some(rel))
            };
            let outcome = run_federated_instance(cfg, corpus, &cfg.federated, cfg.init_users, cfg.init_ratio, 0, &mut save)?;
            let history = outcome.history.as_ref().expect("federated runs keep a history");
            write_json(&out.join("history.json"), history)?;
            let rows: Vec<Vec<String>> = history
                .records
                .iter()
                .map(|r| {
                    vec![
                        r.iteration.to_string(),
                        format!("{}", r.train_loss),
                        r.eer.map(|v| format!("{v}")).unwrap_or_default(),
                        r.accuracy.map(|v| format!("{v}")).unwrap_or_default(),
                    ]
                })
                .collect();
            write_table(&out.join("loss_curve.csv"), &["iteration", "train_loss", "eer", "accuracy"], &rows)?;
            outcome
        }
    };
    write_atomic(&out.join("model.ckpt"), &checkpoint::encode(&outcome.params))?;
    write_with(&out.join("scores.csv"), |b| Ok(outcome.scores.write_csv(b)?))?;
    write_with(&out.join("roc.csv"), |b| Ok(outcome.roc.write_csv(b)?))?;
    log::info!(
        "single run ({:?}): eer {:.4} accuracy {:.4}",
        cfg.mode,
        outcome.roc.eer,
        outcome.roc.accuracy_at_half
    );
    Ok(SingleResults {
        mode: cfg.mode,
        eer: outcome.roc.eer,
        accuracy: outcome.roc.accuracy_at_half,
        accuracy_at_eer: outcome.roc.accuracy_at_eer,
        eer_threshold: outcome.roc.eer_threshold,
        test_samples: outcome.scores.len(),
        train_samples: outcome.agent_samples,
        init_samples: outcome.init_samples,
        checkpoint: "model.ckpt".into(),
    })
}
