//! Experiment configuration: per-kind defaults, the desk preset, JSON config
//! files, and `--field value` overrides.
//!
//! Resolution order, later layers winning: defaults for the experiment kind,
//! the preset, the config file, `--seed`/`--out`, then field overrides.
//! Everything is merged as JSON and deserialized once at the end, so a field
//! that cannot be set from a file cannot be set from a flag either.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use fedsig_core::dataset::SynthConfig;
use fedsig_core::model::ModelConfig;
use fedsig_core::optim::OptimizerKind;
use fedsig_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    CentralizedKernelSweep,
    FlLocalEpochs,
    FlInitRatio,
    FlScalability,
    SingleRun,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        Self::CentralizedKernelSweep,
        Self::FlLocalEpochs,
        Self::FlInitRatio,
        Self::FlScalability,
        Self::SingleRun,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::CentralizedKernelSweep => "centralized-kernel-sweep",
            Self::FlLocalEpochs => "fl-local-epochs",
            Self::FlInitRatio => "fl-init-ratio",
            Self::FlScalability => "fl-scalability",
            Self::SingleRun => "single-run",
        }
    }

    /// Name of the swept quantity, used as a CSV column and in file names.
    pub fn sweep_name(self) -> Option<&'static str> {
        match self {
            Self::CentralizedKernelSweep => Some("kernel_size"),
            Self::FlLocalEpochs => Some("local_epochs"),
            Self::FlInitRatio => Some("init_ratio"),
            Self::FlScalability => Some("agents"),
            Self::SingleRun => None,
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Synthetic corpus and a small network; every kind finishes in minutes.
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// SVC-2004 task directories. With both set, the tasks are merged and
    /// Task 2 users are renumbered after Task 1 users.
    Svc {
        task1: Option<PathBuf>,
        task2: Option<PathBuf>,
    },
    Synthetic(SynthConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Centralized,
    Federated,
}

/// FederatedAveraging settings shared by the federated studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedParams {
    pub agents: usize,
    pub local_epochs: usize,
    pub iterations: usize,
    pub local_batch_size: usize,
    pub lr: f64,
    pub local_optimizer: OptimizerKind,
}

impl Default for FedParams {
    fn default() -> Self {
        Self {
            agents: 2,
            local_epochs: 15,
            iterations: 200,
            local_batch_size: 32,
            lr: 0.001,
            local_optimizer: OptimizerKind::Sgd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub data: DataSource,
    /// Independent repetitions of every sweep value.
    pub instances: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Training samples per user and class; the rest of each user's samples
    /// form the test set.
    pub train_per_class: usize,
    /// Values of the swept quantity (see [`ExperimentKind::sweep_name`]).
    pub sweep: Vec<f64>,
    /// `seed` here is ignored: model seeds are derived per instance.
    pub model: ModelConfig,
    /// Recipe for centralized training and for pretraining the global model.
    pub centralized: TrainConfig,
    pub federated: FedParams,
    /// Users held out from the agents to pretrain the global model.
    pub init_users: usize,
    /// Pretraining set size as a fraction of all agent training data. When
    /// unset, every training sample of the `init_users` is used.
    pub init_ratio: Option<f64>,
    /// Single runs only.
    pub mode: RunMode,
    /// Single federated runs only: save the global model every this many
    /// iterations (0 keeps just the final model).
    pub checkpoint_every: usize,
}

impl ExperimentConfig {
    pub fn defaults(kind: ExperimentKind) -> Self {
        let (sweep, init_users, init_ratio) = match kind {
            ExperimentKind::CentralizedKernelSweep => (vec![3.0, 11.0, 21.0, 31.0, 41.0, 51.0, 61.0, 71.0], 0, None),
            ExperimentKind::FlLocalEpochs => (vec![1.0, 5.0, 15.0, 25.0, 50.0], 20, None),
            ExperimentKind::FlInitRatio => (vec![0.0, 0.05, 0.125, 0.25, 0.375, 0.5, 1.0], 40, None),
            ExperimentKind::FlScalability => (vec![2.0, 5.0, 10.0, 20.0], 40, Some(1.0)),
            ExperimentKind::SingleRun => (Vec::new(), 0, None),
        };
        Self {
            kind,
            data: DataSource::Svc {
                task1: Some(PathBuf::from("SVC2004/Task1")),
                task2: Some(PathBuf::from("SVC2004/Task2")),
            },
            instances: if kind == ExperimentKind::SingleRun { 1 } else { 10 },
            seed: 0,
            out: PathBuf::from("results").join(kind.as_str()),
            train_per_class: 16,
            sweep,
            model: ModelConfig::default(),
            centralized: TrainConfig::centralized(),
            federated: FedParams::default(),
            init_users,
            init_ratio,
            mode: RunMode::Centralized,
            checkpoint_every: 0,
        }
    }

    /// Ten synthetic users and the desk network; sweeps are trimmed to what
    /// ten users can support.
    pub fn desk(kind: ExperimentKind) -> Self {
        let base = Self::defaults(kind);
        let (sweep, init_users, init_ratio) = match kind {
            ExperimentKind::CentralizedKernelSweep => (vec![3.0, 5.0, 9.0, 15.0], 0, None),
            ExperimentKind::FlLocalEpochs => (vec![1.0, 5.0, 15.0], 3, None),
            ExperimentKind::FlInitRatio => (vec![0.0, 0.25, 0.5, 1.0], 5, None),
            ExperimentKind::FlScalability => (vec![2.0, 3.0, 5.0], 5, Some(1.0)),
            ExperimentKind::SingleRun => (Vec::new(), 0, None),
        };
        Self {
            data: DataSource::Synthetic(SynthConfig::default()),
            instances: if kind == ExperimentKind::SingleRun { 1 } else { 3 },
            sweep,
            model: ModelConfig::desk(),
            centralized: TrainConfig {
                epochs: 50,
                batch_size: 32,
                ..TrainConfig::centralized()
            },
            federated: FedParams {
                local_epochs: 5,
                iterations: 20,
                lr: 0.01,
                ..FedParams::default()
            },
            init_users,
            init_ratio,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.instances == 0 {
            return bad("instances must be at least 1".into());
        }
        if self.train_per_class == 0 {
            return bad("train_per_class must be at least 1".into());
        }
        if self.kind != ExperimentKind::SingleRun && self.sweep.is_empty() {
            return bad(format!("{} needs at least one sweep value", self.kind));
        }
        for &v in &self.sweep {
            let integral = v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64;
            let ok = match self.kind {
                ExperimentKind::CentralizedKernelSweep => integral && v as usize % 2 == 1,
                ExperimentKind::FlLocalEpochs => integral,
                ExperimentKind::FlScalability => integral && v >= 1.0,
                ExperimentKind::FlInitRatio => (0.0..=1.0).contains(&v),
                ExperimentKind::SingleRun => true,
            };
            if !ok {
                return bad(format!("sweep value {v} is not valid for {}", self.kind));
            }
        }
        if let Some(r) = self.init_ratio {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("init_ratio must be in [0, 1], got {r}"));
            }
        }
        if let DataSource::Svc { task1: None, task2: None } = self.data {
            return bad("data.svc needs task1, task2, or both".into());
        }
        self.model.validate()?;
        Ok(())
    }
}

/// Loads, merges and validates a configuration.
#[derive(Debug, Clone, Default)]
pub struct ConfigLayers<'a> {
    pub preset: Option<Preset>,
    pub file: Option<&'a Path>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// `(field, raw value)` pairs, applied in order.
    pub overrides: Vec<(String, String)>,
}

fn base_value(kind: ExperimentKind, preset: Option<Preset>) -> Result<Value> {
    let base = match preset {
        Some(Preset::Desk) => ExperimentConfig::desk(kind),
        None => ExperimentConfig::defaults(kind),
    };
    Ok(serde_json::to_value(&base)?)
}

fn merge_file_text(value: &mut Value, kind: ExperimentKind, text: &str, origin: &str) -> Result<()> {
    let file: Value = serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("{origin}: {e}")))?;
    if !file.is_object() {
        return Err(HarnessError::Config(format!("{origin}: expected a JSON object")));
    }
    if let Some(k) = file.get("kind") {
        if k != &Value::String(kind.as_str().into()) {
            return Err(HarnessError::Config(format!("{origin} is for experiment {k}, not {kind}")));
        }
    }
    merge(value, file);
    Ok(())
}

fn finish(value: Value) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        serde_json::from_value(value).map_err(|e| HarnessError::Config(format!("bad configuration: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Configuration from JSON text layered over the defaults, as `--config` does.
pub fn parse_config(kind: ExperimentKind, preset: Option<Preset>, text: &str) -> Result<ExperimentConfig> {
    let mut value = base_value(kind, preset)?;
    merge_file_text(&mut value, kind, text, "config")?;
    finish(value)
}

pub fn resolve(kind: ExperimentKind, layers: &ConfigLayers<'_>) -> Result<ExperimentConfig> {
    let mut value = base_value(kind, layers.preset)?;
    if let Some(path) = layers.file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        merge_file_text(&mut value, kind, &text, &path.display().to_string())?;
    }
    if let Some(seed) = layers.seed {
        value["seed"] = seed.into();
    }
    if let Some(out) = &layers.out {
        value["out"] = out.to_string_lossy().into_owned().into();
    }
    for (key, raw) in &layers.overrides {
        if key == "kind" {
            return Err(HarnessError::Usage("the experiment kind is the first argument, not a field".into()));
        }
        apply_override(&mut value, key, raw)?;
    }
    finish(value)
}

// Objects merge key by key. `data` is an enum, so a file choosing another
// source replaces it instead of ending up with two variants.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if k != "data" || same_variant(slot, &v) => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn same_variant(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Object(a), Value::Object(b)) => a.keys().eq(b.keys()),
        _ => false,
    }
}

/// Dotted paths of every non-object value, e.g. `federated.lr`.
pub fn leaf_paths(value: &Value) -> Vec<String> {
    fn walk(v: &Value, prefix: &str, out: &mut Vec<String>) {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(child, &path, out);
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }
    let mut out = Vec::new();
    walk(value, "", &mut out);
    out
}

// A bare name resolves to the top-level field of that name, or else to the
// only nested field ending in it. Dotted names are taken literally.
fn resolve_key(value: &Value, key: &str) -> Result<String> {
    let key = key.replace('-', "_");
    let leaves = leaf_paths(value);
    // Top-level fields are addressable even when they are objects (`--data '{..}'`).
    if value.get(&key).is_some() || leaves.iter().any(|p| *p == key) {
        return Ok(key);
    }
    if key.contains('.') {
        return Err(HarnessError::Usage(format!("unknown configuration field `{key}`")));
    }
    let suffix = format!(".{key}");
    let matches: Vec<&String> = leaves.iter().filter(|p| p.ends_with(&suffix)).collect();
    match matches.as_slice() {
        [one] => Ok((*one).clone()),
        [] => Err(HarnessError::Usage(format!("unknown configuration field `{key}`"))),
        many => Err(HarnessError::Usage(format!(
            "`{key}` is ambiguous, use one of: {}",
            many.iter().map(|s| format!("--{s}")).collect::<Vec<_>>().join(", ")
        ))),
    }
}

fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

pub fn apply_override(value: &mut Value, key: &str, raw: &str) -> Result<()> {
    let path = resolve_key(value, key)?;
    let mut slot = &mut *value;
    for part in path.split('.') {
        slot = slot
            .get_mut(part)
            .ok_or_else(|| HarnessError::Usage(format!("unknown configuration field `{path}`")))?;
    }
    *slot = match (&*slot, parse_scalar(raw)) {
        // `--sweep 1,5,15` as well as `--sweep [1,5,15]`
        (_, v @ Value::Array(_)) => v,
        (Value::Array(_), _) => Value::Array(raw.split(',').map(|p| parse_scalar(p.trim())).collect()),
        (_, v) => v,
    };
    Ok(())
}

/// Splits `--name value` and `--name=value` pairs.
pub fn parse_override_args(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let name = arg
            .strip_prefix("--")
            .ok_or_else(|| HarnessError::Usage(format!("expected a --field flag, found `{arg}`")))?;
        match name.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| HarnessError::Usage(format!("--{name} needs a value")))?;
                out.push((name.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

/// Help text listing every overridable field with its default.
pub fn override_help() -> String {
    let mut lines = vec!["Configuration fields (override any with --<field> <value>):".to_string()];
    let mut seen = Map::new();
    for kind in ExperimentKind::ALL {
        let v = serde_json::to_value(ExperimentConfig::defaults(kind)).expect("config serializes");
        let mut synth = v.clone();
        synth["data"] = serde_json::to_value(DataSource::Synthetic(SynthConfig::default())).expect("serializes");
        for source in [&v, &synth] {
            for path in leaf_paths(source) {
                if path == "kind" || seen.contains_key(&path) {
                    continue;
                }
                let mut leaf = source;
                for part in path.split('.') {
                    leaf = &leaf[part];
                }
                seen.insert(path, leaf.clone());
            }
        }
    }
    for (path, default) in &seen {
        lines.push(format!("  --{path:<34} default {default}"));
    }
    lines.push("A bare field name works when it is unique, e.g. --kernel_size 21 or --iterations 50.".into());
    lines.push("Lists take commas (--sweep 1,5,15); whole sections take JSON (--data '{\"synthetic\": {}}').".into());
    lines.join("\n")
}
