use rayon::prelude::*;

use super::{Corpus, ProcessedSignature, RawSignature};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn normalize_axis(values: impl Iterator<Item = i64> + Clone) -> Vec<f64> {
    let n = values.clone().count() as f64;
    let centroid = values.clone().map(|v| v as f64).sum::<f64>() / n;
    let (lo, hi) = values
        .clone()
        .fold((i64::MAX, i64::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)));
    // A flat axis keeps its centered values (all zero) instead of dividing by
    // zero. Flatness is judged after the f64 conversion: distinct i64s near
    // the extremes can round to the same float.
    let spread = (hi as f64) - (lo as f64);
    let range = if spread > 0.0 { spread } else { 1.0 };
    values.map(|v| (v as f64 - centroid) / range).collect()
}

/// Centers each axis on the centroid and divides by its extent.
///
/// Returns `(xs, ys)` over the true length of the signature.
pub fn normalize(raw: &RawSignature) -> (Vec<f64>, Vec<f64>) {
    let xs = normalize_axis(raw.points.iter().map(|p| p.x));
    let ys = normalize_axis(raw.points.iter().map(|p| p.y));
    (xs, ys)
}

/// Appends zero frames so both channels have `max_length` entries.
pub fn pad(xs: &[f64], ys: &[f64], max_length: usize, raw: &RawSignature) -> Result<ProcessedSignature> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("x has {} frames, y has {}", xs.len(), ys.len())));
    }
    let len = xs.len();
    if len > max_length {
        return Err(Error::LengthOverflow {
            user_id: raw.user_id,
            sample_index: raw.sample_index,
            length: len,
            max_length,
        });
    }
    let mut data = vec![0.0; 2 * max_length];
    data[..len].copy_from_slice(xs);
    data[max_length..max_length + len].copy_from_slice(ys);
    Ok(ProcessedSignature {
        channels: Tensor::new(vec![2, max_length], data)?,
        true_length: len,
        label: raw.label,
        user_id: raw.user_id,
        sample_index: raw.sample_index,
    })
}

pub fn preprocess(raw: &RawSignature, max_length: usize) -> Result<ProcessedSignature> {
    if raw.points.len() < 2 {
        return Err(Error::Dataset(format!(
            "user {} sample {} has fewer than 2 points",
            raw.user_id, raw.sample_index
        )));
    }
    let (xs, ys) = normalize(raw);
    pad(&xs, &ys, max_length, raw)
}

/// Preprocesses a whole corpus, preserving its order.
pub fn preprocess_all(corpus: &Corpus, max_length: usize) -> Result<Vec<ProcessedSignature>> {
    corpus
        .signatures()
        .par_iter()
        .map(|s| preprocess(s, max_length))
        .collect()
}
