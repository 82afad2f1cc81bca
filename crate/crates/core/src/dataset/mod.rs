//! Signature corpora: parsing, synthesis, preprocessing, and splits.

mod preprocess;
mod split;
mod svc;
mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{FORGED, GENUINE};
use crate::model::Batch;
use crate::tensor::Tensor;

pub use preprocess::{normalize, pad, preprocess, preprocess_all};
pub use split::{partition_agents, split_train_test};
pub use svc::{load_corpus, parse_svc_file, to_svc_text, LoadedCorpus, SVC_FORGED_FROM, SVC_SAMPLES_PER_USER};
pub use synth::{synth_generate, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Forged,
    Genuine,
}

impl Label {
    pub fn class_index(self) -> usize {
        match self {
            Label::Forged => FORGED,
            Label::Genuine => GENUINE,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Forged => "forged",
            Label::Genuine => "genuine",
        }
    }
}

/// Pen orientation and pressure, present in 7-field (Task 2) files only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PenState {
    pub azimuth: i64,
    pub altitude: i64,
    pub pressure: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Point {
    pub x: i64,
    pub y: i64,
    pub timestamp: i64,
    /// 1 while the pen touches the tablet.
    pub button: u8,
    pub pen: Option<PenState>,
}

impl Point {
    pub fn xy(x: i64, y: i64) -> Self {
        Self {
            x,
            y,
            timestamp: 0,
            button: 1,
            pen: None,
        }
    }
}

/// A parsed pen trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSignature {
    pub user_id: u32,
    pub sample_index: u32,
    pub label: Label,
    pub points: Vec<Point>,
}

/// Normalized, zero-padded `[2, max_length]` coordinate matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedSignature {
    pub channels: Tensor,
    pub true_length: usize,
    pub label: Label,
    pub user_id: u32,
    pub sample_index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    SvcTask1,
    SvcTask2,
    Synthetic,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserCounts {
    pub genuine: usize,
    pub forged: usize,
}

/// Signatures ordered by `(user_id, sample_index)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    signatures: Vec<RawSignature>,
    provenance: Vec<Provenance>,
}

impl Corpus {
    pub fn new(mut signatures: Vec<RawSignature>, provenance: Vec<Provenance>) -> Self {
        signatures.sort_by_key(|s| (s.user_id, s.sample_index));
        Self {
            signatures,
            provenance,
        }
    }

    pub fn signatures(&self) -> &[RawSignature] {
        &self.signatures
    }

    pub fn into_signatures(self) -> Vec<RawSignature> {
        self.signatures
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.signatures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signatures.is_empty()
    }

    /// Distinct user ids in ascending order.
    pub fn users(&self) -> Vec<u32> {
        let mut users: Vec<u32> = self.signatures.iter().map(|s| s.user_id).collect();
        users.dedup();
        users
    }

    pub fn user_counts(&self) -> BTreeMap<u32, UserCounts> {
        let mut counts: BTreeMap<u32, UserCounts> = BTreeMap::new();
        for s in &self.signatures {
            let c = counts.entry(s.user_id).or_default();
            match s.label {
                Label::Genuine => c.genuine += 1,
                Label::Forged => c.forged += 1,
            }
        }
        counts
    }

    /// Signatures of the given users, in corpus order.
    pub fn select_users(&self, users: &[u32]) -> Corpus {
        let keep: std::collections::BTreeSet<u32> = users.iter().copied().collect();
        Corpus {
            signatures: self
                .signatures
                .iter()
                .filter(|s| keep.contains(&s.user_id))
                .cloned()
                .collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Appends `other`, shifting its user ids past this corpus's largest id
    /// so that the two user populations stay distinct.
    pub fn merge(self, other: Corpus) -> Corpus {
        let offset = self.signatures.iter().map(|s| s.user_id).max().unwrap_or(0);
        let mut signatures = self.signatures;
        signatures.extend(other.signatures.into_iter().map(|mut s| {
            s.user_id += offset;
            s
        }));
        let mut provenance = self.provenance;
        for p in other.provenance {
            if !provenance.contains(&p) {
                provenance.push(p);
            }
        }
        Corpus::new(signatures, provenance)
    }

    /// JSON-serializable user/sample/label inventory.
    pub fn manifest(&self) -> CorpusManifest {
        let mut users: BTreeMap<u32, ManifestUser> = BTreeMap::new();
        for s in &self.signatures {
            let u = users.entry(s.user_id).or_insert_with(|| ManifestUser {
                user_id: s.user_id,
                genuine: Vec::new(),
                forged: Vec::new(),
            });
            match s.label {
                Label::Genuine => u.genuine.push(s.sample_index),
                Label::Forged => u.forged.push(s.sample_index),
            }
        }
        CorpusManifest {
            provenance: self.provenance.clone(),
            total: self.signatures.len(),
            users: users.into_values().collect(),
            warnings: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestUser {
    pub user_id: u32,
    pub genuine: Vec<u32>,
    pub forged: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub provenance: Vec<Provenance>,
    pub total: usize,
    pub users: Vec<ManifestUser>,
    pub warnings: Vec<String>,
}

/// Stacks the selected samples into a model batch.
pub fn make_batch(samples: &[ProcessedSignature], indices: &[usize]) -> Result<Batch> {
    let first = indices
        .first()
        .and_then(|&i| samples.get(i))
        .ok_or_else(|| Error::Dataset("empty batch selection".into()))?;
    let per_sample = first.channels.len();
    let mut shape = vec![indices.len()];
    shape.extend_from_slice(first.channels.shape());
    let mut data = Vec::with_capacity(indices.len() * per_sample);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = samples
            .get(i)
            .ok_or_else(|| Error::Dataset(format!("sample index {i} out of range")))?;
        if s.channels.shape() != first.channels.shape() {
            return Err(Error::Shape("samples in a batch must share one shape".into()));
        }
        data.extend_from_slice(s.channels.data());
        labels.push(s.label.class_index());
    }
    Batch::new(Tensor::new(shape, data)?, labels)
}

/// Every sample, in order, as one batch.
pub fn full_batch(samples: &[ProcessedSignature]) -> Result<Batch> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    make_batch(samples, &idx)
}
