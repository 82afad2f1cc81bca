//! Verification scores, ROC curves, equal error rate, and instance summaries.
//!
//! A sample is accepted as genuine when its score is at or above the
//! threshold. FAR is the fraction of forgeries accepted; FRR is the fraction
//! of genuine signatures rejected.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{full_batch, Label, ProcessedSignature};
use crate::error::{Error, Result};
use crate::layers::{softmax, Mode, GENUINE};
use crate::model::{forward, ModelParams};

const SCORE_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub user_id: u32,
    pub label: Label,
    /// Probability of the genuine class.
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub samples: Vec<ScoredSample>,
}

impl ScoreSet {
    pub fn new(samples: Vec<ScoredSample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn class_scores(&self, label: Label) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .samples
            .iter()
            .filter(|s| s.label == label)
            .map(|s| s.score)
            .collect();
        v.sort_by(f64::total_cmp);
        v
    }

    /// CSV with header `user_id,label,score`, rows grouped by user.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut rows: Vec<&ScoredSample> = self.samples.iter().collect();
        rows.sort_by_key(|s| s.user_id);
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["user_id", "label", "score"]).map_err(csv_err)?;
        for s in rows {
            w.write_record([s.user_id.to_string(), s.label.as_str().to_string(), s.score.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Genuine-class probabilities for each signature, from an eval-mode forward pass.
pub fn score_batch(params: &ModelParams, signatures: &[ProcessedSignature]) -> Result<ScoreSet> {
    let mut samples = Vec::with_capacity(signatures.len());
    for chunk in signatures.chunks(SCORE_CHUNK) {
        let batch = full_batch(chunk)?;
        let out = forward(params, &batch.inputs, Mode::Eval)?;
        let probs = softmax(&out.logits)?;
        let classes = params.config().num_classes;
        for (sig, row) in chunk.iter().zip(probs.data().chunks(classes)) {
            samples.push(ScoredSample {
                user_id: sig.user_id,
                label: sig.label,
                score: row[GENUINE],
            });
        }
    }
    Ok(ScoreSet { samples })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EerMethod {
    /// Linear interpolation where FAR - FRR changes sign.
    #[default]
    Interpolated,
    /// The curve point minimizing |FAR - FRR|, reported as (FAR + FRR) / 2.
    Discrete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Ordered by increasing threshold: FAR falls, FRR rises.
    pub points: Vec<RocPoint>,
    pub eer: f64,
    pub eer_threshold: f64,
    pub accuracy_at_half: f64,
    pub accuracy_at_eer: f64,
}

impl RocCurve {
    /// CSV with header `threshold,far,frr`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["threshold", "far", "frr"]).map_err(csv_err)?;
        for p in &self.points {
            w.write_record([p.threshold.to_string(), p.far.to_string(), p.frr.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

// Fractions of `sorted` values at or above `t` and below `t`.
fn frac_at_or_above(sorted: &[f64], t: f64) -> f64 {
    let below = sorted.partition_point(|&v| v < t);
    (sorted.len() - below) as f64 / sorted.len() as f64
}

fn frac_below(sorted: &[f64], t: f64) -> f64 {
    sorted.partition_point(|&v| v < t) as f64 / sorted.len() as f64
}

/// Candidate thresholds: one below every score, the midpoints between
/// consecutive distinct scores, and one above every score.
pub fn roc_thresholds(scores: &ScoreSet) -> Vec<f64> {
    let mut all: Vec<f64> = scores.samples.iter().map(|s| s.score).collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut out = Vec::with_capacity(all.len() + 1);
    if let (Some(&lo), Some(&hi)) = (all.first(), all.last()) {
        out.push(lo - 1.0);
        out.extend(all.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
        out.push(hi + 1.0);
    }
    out
}

pub fn roc_and_eer(scores: &ScoreSet) -> Result<RocCurve> {
    roc_with_method(scores, EerMethod::Interpolated)
}

pub fn roc_with_method(scores: &ScoreSet, method: EerMethod) -> Result<RocCurve> {
    if scores.samples.iter().any(|s| !s.score.is_finite()) {
        return Err(Error::Metric("scores must be finite".into()));
    }
    let genuine = scores.class_scores(Label::Genuine);
    let forged = scores.class_scores(Label::Forged);
    if genuine.is_empty() || forged.is_empty() {
        return Err(Error::Metric(format!(
            "ROC needs both classes, got {} genuine and {} forged",
            genuine.len(),
            forged.len()
        )));
    }
    let points: Vec<RocPoint> = roc_thresholds(scores)
        .into_iter()
        .map(|threshold| RocPoint {
            threshold,
            far: frac_at_or_above(&forged, threshold),
            frr: frac_below(&genuine, threshold),
        })
        .collect();

    let (eer, eer_threshold) = match method {
        EerMethod::Interpolated => interpolated_eer(&points),
        EerMethod::Discrete => {
            let best = points
                .iter()
                .min_by(|a, b| (a.far - a.frr).abs().total_cmp(&(b.far - b.frr).abs()))
                .expect("at least two points");
            ((best.far + best.frr) / 2.0, best.threshold)
        }
    };
    Ok(RocCurve {
        eer,
        eer_threshold,
        accuracy_at_half: accuracy(scores, 0.5)?,
        accuracy_at_eer: accuracy(scores, eer_threshold)?,
        points,
    })
}

// The curve starts at FAR=1, FRR=0 and ends at FAR=0, FRR=1, so FAR - FRR
// goes from +1 to -1 and has a first non-positive point.
fn interpolated_eer(points: &[RocPoint]) -> (f64, f64) {
    let diff = |p: &RocPoint| p.far - p.frr;
    let i = points
        .iter()
        .position(|p| diff(p) <= 0.0)
        .expect("last point has FAR 0 and FRR 1");
    let hit = &points[i];
    if diff(hit) == 0.0 || i == 0 {
        return (hit.far, hit.threshold);
    }
    let prev = &points[i - 1];
    let alpha = diff(prev) / (diff(prev) - diff(hit));
    let eer = prev.far + alpha * (hit.far - prev.far);
    let threshold = prev.threshold + alpha * (hit.threshold - prev.threshold);
    (eer, threshold)
}

/// Fraction of samples whose decision at `threshold` matches the label.
pub fn accuracy(scores: &ScoreSet, threshold: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Metric("accuracy of an empty score set".into()));
    }
    let correct = scores
        .samples
        .iter()
        .filter(|s| (s.score >= threshold) == (s.label == Label::Genuine))
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

/// Five-number summary of a metric over repeated model instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    /// Index of the instance at the lower median rank.
    pub median_instance: usize,
}

// Linear interpolation between closest ranks.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize_instances(values: &[f64]) -> Result<InstanceSummary> {
    if values.is_empty() {
        return Err(Error::Metric("no instances to summarize".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Metric("instance values must be finite".into()));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    Ok(InstanceSummary {
        count: values.len(),
        min: sorted[0],
        q1: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        q3: quantile(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
        median_instance: order[(values.len() - 1) / 2],
    })
}
