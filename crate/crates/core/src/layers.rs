//! Layer primitives with explicit forward and backward passes.
//!
//! Every forward function returns its output together with a cache; the
//! matching `*_backward` function consumes that cache and the upstream
//! gradient and returns gradients for the inputs and parameters. All
//! functions are pure: batch-norm returns updated running statistics instead
//! of mutating them.
//!
//! Activations use the `[N, C, L]` layout (batch, channel, position).

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch statistic in the running averages.
pub const BN_MOMENTUM: f64 = 0.1;
/// Floor applied to probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Per-layer record of whatever the backward pass needs.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Conv1d(Conv1dCache),
    BatchNorm(BatchNormCache),
    Relu(ReluCache),
    MaxPool(MaxPoolCache),
    Linear(LinearCache),
}

/// Output length of a sliding window op, or `None` when no window fits.
pub fn sliding_output_len(len: usize, window: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len.checked_add(pad.checked_mul(2)?)?;
    if stride == 0 || window == 0 || window > padded {
        return None;
    }
    Some((padded - window) / stride + 1)
}

// Output positions t for which input index t*stride + tap - pad lies in [0, len_in).
fn valid_positions(tap: usize, pad: usize, stride: usize, len_in: usize, len_out: usize) -> Range<usize> {
    let lo = if pad > tap {
        (pad - tap).div_ceil(stride)
    } else {
        0
    };
    let hi = if len_in + pad > tap {
        ((len_in + pad - tap - 1) / stride + 1).min(len_out)
    } else {
        0
    };
    lo..hi.max(lo)
}

// ---------------------------------------------------------------------------
// conv1d

#[derive(Debug, Clone)]
pub struct Conv1dCache {
    input: Tensor,
    stride: usize,
    pad: usize,
    out_len: usize,
}

#[derive(Debug, Clone)]
pub struct Conv1dGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// 1-D cross-correlation: `out[n,j,t] = bias[j] + sum_{i,tap} weight[j,i,tap] * x[n,i,t*stride+tap-pad]`
/// where out-of-range input positions read as zero.
pub fn conv1d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Conv1dCache)> {
    let (n, c_in, len) = input.dims3("conv1d input")?;
    let (c_out, w_in, k) = weight.dims3("conv1d weight")?;
    if w_in != c_in {
        return Err(Error::Shape(format!(
            "conv1d: input has {c_in} channels but weight expects {w_in}"
        )));
    }
    if bias.dims1("conv1d bias")? != c_out {
        return Err(Error::Shape(format!(
            "conv1d: bias length {} != output channels {c_out}",
            bias.len()
        )));
    }
    let out_len = sliding_output_len(len, k, stride, pad).ok_or_else(|| {
        Error::Shape(format!(
            "conv1d: kernel {k} with stride {stride} and pad {pad} does not fit length {len}"
        ))
    })?;

    let x = input.data();
    let w = weight.data();
    let b = bias.data();
    let mut out = vec![0.0; n * c_out * out_len];
    out.par_chunks_mut(out_len).enumerate().for_each(|(row, out_row)| {
        let (s, j) = (row / c_out, row % c_out);
        out_row.fill(b[j]);
        for i in 0..c_in {
            let x_row = &x[(s * c_in + i) * len..][..len];
            let w_row = &w[(j * c_in + i) * k..][..k];
            for (tap, &wv) in w_row.iter().enumerate() {
                for t in valid_positions(tap, pad, stride, len, out_len) {
                    out_row[t] += wv * x_row[t * stride + tap - pad];
                }
            }
        }
    });

    let output = Tensor::new(vec![n, c_out, out_len], out)?;
    let cache = Conv1dCache {
        input: input.clone(),
        stride,
        pad,
        out_len,
    };
    Ok((output, cache))
}

pub fn conv1d_backward(cache: &Conv1dCache, weight: &Tensor, grad_out: &Tensor) -> Result<Conv1dGrads> {
    let (n, c_in, len) = cache.input.dims3("conv1d cached input")?;
    let (c_out, w_in, k) = weight.dims3("conv1d weight")?;
    if w_in != c_in || grad_out.shape() != [n, c_out, cache.out_len] {
        return Err(Error::Shape(format!(
            "conv1d backward: gradient {:?} does not match forward output [{n}, {c_out}, {}]",
            grad_out.shape(),
            cache.out_len
        )));
    }
    let (stride, pad, out_len) = (cache.stride, cache.pad, cache.out_len);
    let x = cache.input.data();
    let w = weight.data();
    let g = grad_out.data();

    let mut gw = vec![0.0; c_out * c_in * k];
    let mut gb = vec![0.0; c_out];
    gw.par_chunks_mut(c_in * k)
        .zip(gb.par_iter_mut())
        .enumerate()
        .for_each(|(j, (gw_j, gb_j))| {
            for s in 0..n {
                let g_row = &g[(s * c_out + j) * out_len..][..out_len];
                *gb_j += g_row.iter().sum::<f64>();
                for i in 0..c_in {
                    let x_row = &x[(s * c_in + i) * len..][..len];
                    for tap in 0..k {
                        let mut acc = 0.0;
                        for t in valid_positions(tap, pad, stride, len, out_len) {
                            acc += g_row[t] * x_row[t * stride + tap - pad];
                        }
                        gw_j[i * k + tap] += acc;
                    }
                }
            }
        });

    let mut gx = vec![0.0; n * c_in * len];
    gx.par_chunks_mut(c_in * len).enumerate().for_each(|(s, gx_s)| {
        for j in 0..c_out {
            let g_row = &g[(s * c_out + j) * out_len..][..out_len];
            for i in 0..c_in {
                let gx_row = &mut gx_s[i * len..][..len];
                let w_row = &w[(j * c_in + i) * k..][..k];
                for (tap, &wv) in w_row.iter().enumerate() {
                    for t in valid_positions(tap, pad, stride, len, out_len) {
                        gx_row[t * stride + tap - pad] += wv * g_row[t];
                    }
                }
            }
        }
    });

    Ok(Conv1dGrads {
        input: Tensor::new(vec![n, c_in, len], gx)?,
        weight: Tensor::new(vec![c_out, c_in, k], gw)?,
        bias: Tensor::new(vec![c_out], gb)?,
    })
}

// ---------------------------------------------------------------------------
// batch norm

/// Per-channel running mean and variance used in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    normalized: Tensor,
    inv_std: Vec<f64>,
    mode: Mode,
}

impl BatchNormCache {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Batch normalization over the `N x L` axis of each channel followed by `gamma * x + beta`.
///
/// Train mode uses the batch mean and population variance and returns running
/// statistics moved towards them by `momentum`. Eval mode normalizes with the
/// running statistics and returns them unchanged.
pub fn batchnorm1d(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &RunningStats,
    mode: Mode,
    eps: f64,
    momentum: f64,
) -> Result<(Tensor, BatchNormCache, RunningStats)> {
    let (n, c, len) = input.dims3("batchnorm input")?;
    if gamma.shape() != [c] || beta.shape() != [c] || running.mean.len() != c || running.var.len() != c {
        return Err(Error::Shape(format!(
            "batchnorm: parameters do not match {c} channels"
        )));
    }
    let count = n * len;
    if mode == Mode::Train && count < 2 {
        return Err(Error::Shape(format!(
            "batchnorm: train mode needs at least 2 values per channel, got {count}"
        )));
    }
    let x = input.data();
    let (mean, var) = match mode {
        Mode::Train => channel_moments(x, n, c, len),
        Mode::Eval => (running.mean.clone(), running.var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * len;
            for p in base..base + len {
                let h = (x[p] - mean[ch]) * inv_std[ch];
                xhat[p] = h;
                out[p] = gamma.data()[ch] * h + beta.data()[ch];
            }
        }
    }

    let updated = match mode {
        Mode::Train => RunningStats {
            mean: running
                .mean
                .iter()
                .zip(&mean)
                .map(|(r, m)| (1.0 - momentum) * r + momentum * m)
                .collect(),
            var: running
                .var
                .iter()
                .zip(&var)
                .map(|(r, v)| (1.0 - momentum) * r + momentum * v)
                .collect(),
        },
        Mode::Eval => running.clone(),
    };

    let cache = BatchNormCache {
        normalized: Tensor::new(vec![n, c, len], xhat)?,
        inv_std,
        mode,
    };
    Ok((Tensor::new(vec![n, c, len], out)?, cache, updated))
}

// Per-channel mean and population variance over the batch and position axes.
fn channel_moments(x: &[f64], n: usize, c: usize, len: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * len) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for s in 0..n {
            sum += x[(s * c + ch) * len..][..len].iter().sum::<f64>();
        }
        let m = sum / count;
        let mut sq = 0.0;
        for s in 0..n {
            sq += x[(s * c + ch) * len..][..len]
                .iter()
                .map(|v| (v - m) * (v - m))
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = sq / count;
    }
    (mean, var)
}

pub fn batchnorm1d_backward(cache: &BatchNormCache, gamma: &Tensor, grad_out: &Tensor) -> Result<BatchNormGrads> {
    let (n, c, len) = cache.normalized.dims3("batchnorm cache")?;
    if grad_out.shape() != cache.normalized.shape() || gamma.shape() != [c] {
        return Err(Error::Shape(format!(
            "batchnorm backward: gradient {:?} does not match forward output {:?}",
            grad_out.shape(),
            cache.normalized.shape()
        )));
    }
    let g = grad_out.data();
    let xhat = cache.normalized.data();
    let count = (n * len) as f64;

    let mut g_gamma = vec![0.0; c];
    let mut g_beta = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * len;
            for p in base..base + len {
                g_beta[ch] += g[p];
                g_gamma[ch] += g[p] * xhat[p];
            }
        }
    }

    let mut gx = vec![0.0; g.len()];
    for s in 0..n {
        for ch in 0..c {
            let scale = gamma.data()[ch] * cache.inv_std[ch];
            let base = (s * c + ch) * len;
            for p in base..base + len {
                gx[p] = match cache.mode {
                    // d/dx of the batch-statistics normalization, with the
                    // mean and variance terms folded into the channel sums.
                    Mode::Train => scale * (g[p] - g_beta[ch] / count - xhat[p] * g_gamma[ch] / count),
                    Mode::Eval => scale * g[p],
                };
            }
        }
    }

    Ok(BatchNormGrads {
        input: Tensor::new(vec![n, c, len], gx)?,
        gamma: Tensor::new(vec![c], g_gamma)?,
        beta: Tensor::new(vec![c], g_beta)?,
    })
}

// ---------------------------------------------------------------------------
// relu

#[derive(Debug, Clone)]
pub struct ReluCache {
    active: Vec<bool>,
    shape: Vec<usize>,
}

pub fn relu(input: &Tensor) -> (Tensor, ReluCache) {
    let active: Vec<bool> = input.data().iter().map(|&v| v > 0.0).collect();
    let out = input
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v } else { 0.0 })
        .collect();
    let output = Tensor::new(input.shape().to_vec(), out).expect("same shape");
    (
        output,
        ReluCache {
            active,
            shape: input.shape().to_vec(),
        },
    )
}

pub fn relu_backward(cache: &ReluCache, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != cache.shape.as_slice() {
        return Err(Error::Shape(format!(
            "relu backward: gradient {:?} vs forward {:?}",
            grad_out.shape(),
            cache.shape
        )));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(&cache.active)
        .map(|(&g, &a)| if a { g } else { 0.0 })
        .collect();
    Tensor::new(cache.shape.clone(), data)
}

// ---------------------------------------------------------------------------
// max pool

#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    input_shape: Vec<usize>,
    out_len: usize,
    // Index of the selected element within its input row, per output element.
    argmax: Vec<usize>,
}

/// 1-D max pooling. Padding positions act as negative infinity, so a
/// selected position is always a real input element.
pub fn maxpool1d(input: &Tensor, window: usize, stride: usize, pad: usize) -> Result<(Tensor, MaxPoolCache)> {
    let (n, c, len) = input.dims3("maxpool input")?;
    if pad >= window {
        return Err(Error::Shape(format!(
            "maxpool: pad {pad} must be smaller than window {window}"
        )));
    }
    let out_len = sliding_output_len(len, window, stride, pad).ok_or_else(|| {
        Error::Shape(format!(
            "maxpool: window {window} with stride {stride} and pad {pad} does not fit length {len}"
        ))
    })?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * out_len);
    let mut argmax = Vec::with_capacity(n * c * out_len);
    for row in 0..n * c {
        let x_row = &x[row * len..][..len];
        for t in 0..out_len {
            let start = (t * stride).saturating_sub(pad);
            let end = (t * stride + window).saturating_sub(pad).min(len);
            let mut best = start;
            for p in start + 1..end {
                if x_row[p] > x_row[best] {
                    best = p;
                }
            }
            out.push(x_row[best]);
            argmax.push(best);
        }
    }
    let cache = MaxPoolCache {
        input_shape: vec![n, c, len],
        out_len,
        argmax,
    };
    Ok((Tensor::new(vec![n, c, out_len], out)?, cache))
}

pub fn maxpool1d_backward(cache: &MaxPoolCache, grad_out: &Tensor) -> Result<Tensor> {
    let (n, c, len) = (cache.input_shape[0], cache.input_shape[1], cache.input_shape[2]);
    if grad_out.shape() != [n, c, cache.out_len] {
        return Err(Error::Shape(format!(
            "maxpool backward: gradient {:?} vs forward output [{n}, {c}, {}]",
            grad_out.shape(),
            cache.out_len
        )));
    }
    let mut gx = vec![0.0; n * c * len];
    for (row, g_row) in grad_out.data().chunks(cache.out_len).enumerate() {
        for (t, &g) in g_row.iter().enumerate() {
            gx[row * len + cache.argmax[row * cache.out_len + t]] += g;
        }
    }
    Tensor::new(cache.input_shape.clone(), gx)
}

// ---------------------------------------------------------------------------
// linear

#[derive(Debug, Clone)]
pub struct LinearCache {
    input: Tensor,
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// `y = x W + b` for `x: [N, D]`, `W: [D, M]`, `b: [M]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(Tensor, LinearCache)> {
    let (n, d) = input.dims2("linear input")?;
    let (wd, m) = weight.dims2("linear weight")?;
    if wd != d || bias.shape() != [m] {
        return Err(Error::Shape(format!(
            "linear: input [{n}, {d}], weight {:?}, bias {:?}",
            weight.shape(),
            bias.shape()
        )));
    }
    let x = input.data();
    let w = weight.data();
    let mut out = Vec::with_capacity(n * m);
    for s in 0..n {
        let x_row = &x[s * d..][..d];
        for o in 0..m {
            let mut acc = bias.data()[o];
            for (q, &xv) in x_row.iter().enumerate() {
                acc += xv * w[q * m + o];
            }
            out.push(acc);
        }
    }
    Ok((
        Tensor::new(vec![n, m], out)?,
        LinearCache {
            input: input.clone(),
        },
    ))
}

pub fn linear_backward(cache: &LinearCache, weight: &Tensor, grad_out: &Tensor) -> Result<LinearGrads> {
    let (n, d) = cache.input.dims2("linear cache")?;
    let (_, m) = weight.dims2("linear weight")?;
    if grad_out.shape() != [n, m] || weight.shape() != [d, m] {
        return Err(Error::Shape(format!(
            "linear backward: gradient {:?} vs forward output [{n}, {m}]",
            grad_out.shape()
        )));
    }
    let x = cache.input.data();
    let w = weight.data();
    let g = grad_out.data();
    let mut gw = vec![0.0; d * m];
    let mut gb = vec![0.0; m];
    let mut gx = vec![0.0; n * d];
    for s in 0..n {
        let g_row = &g[s * m..][..m];
        for (o, &gv) in g_row.iter().enumerate() {
            gb[o] += gv;
        }
        for q in 0..d {
            let xv = x[s * d + q];
            let mut acc = 0.0;
            for o in 0..m {
                gw[q * m + o] += xv * g_row[o];
                acc += g_row[o] * w[q * m + o];
            }
            gx[s * d + q] = acc;
        }
    }
    Ok(LinearGrads {
        input: Tensor::new(vec![n, d], gx)?,
        weight: Tensor::new(vec![d, m], gw)?,
        bias: Tensor::new(vec![m], gb)?,
    })
}

// ---------------------------------------------------------------------------
// loss

/// Class index of a forged signature.
pub const FORGED: usize = 0;
/// Class index of a genuine signature.
pub const GENUINE: usize = 1;

#[derive(Debug, Clone)]
pub struct LossOutput {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    /// Gradient of the mean loss with respect to the logits.
    pub grad_logits: Tensor,
    /// Softmax probability of the genuine class, per row.
    pub prob_genuine: Vec<f64>,
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (n, m) = logits.dims2("softmax logits")?;
    let mut out = Vec::with_capacity(n * m);
    for row in logits.data().chunks(m) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / total));
    }
    Tensor::new(vec![n, m], out)
}

pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<LossOutput> {
    let (n, m) = logits.dims2("loss logits")?;
    if labels.len() != n {
        return Err(Error::Shape(format!("loss: {} labels for {n} rows", labels.len())));
    }
    if m <= GENUINE {
        return Err(Error::Shape(format!("loss: need at least 2 classes, got {m}")));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= m) {
        return Err(Error::Shape(format!("loss: label {bad} out of range for {m} classes")));
    }
    let probs = softmax(logits)?;
    let p = probs.data();
    let mut loss = 0.0;
    let mut grad = p.to_vec();
    let scale = 1.0 / n as f64;
    for (s, &label) in labels.iter().enumerate() {
        loss -= p[s * m + label].max(LOG_FLOOR).ln();
        grad[s * m + label] -= 1.0;
    }
    grad.iter_mut().for_each(|g| *g *= scale);
    let prob_genuine = (0..n).map(|s| p[s * m + GENUINE]).collect();
    Ok(LossOutput {
        loss: loss * scale,
        grad_logits: Tensor::new(vec![n, m], grad)?,
        prob_genuine,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t3(shape: [usize; 3], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    // Independent direct-summation reference for conv1d.
    fn conv_reference(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
        let (n, c_in, len) = x.dims3("x").unwrap();
        let (c_out, _, k) = w.dims3("w").unwrap();
        let padded_len = len + 2 * pad;
        let mut out = Vec::new();
        for s in 0..n {
            for j in 0..c_out {
                let mut t = 0;
                while t * stride + k <= padded_len {
                    let mut acc = b.data()[j];
                    for i in 0..c_in {
                        for tap in 0..k {
                            let p = (t * stride + tap) as isize - pad as isize;
                            if p >= 0 && (p as usize) < len {
                                acc += w.data()[(j * c_in + i) * k + tap] * x.data()[(s * c_in + i) * len + p as usize];
                            }
                        }
                    }
                    out.push(acc);
                    t += 1;
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t3([1, 1, 4], &[1.0, -2.0, 3.5, 0.25]);
        let w = t3([1, 1, 1], &[1.0]);
        let (y, _) = conv1d(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_difference_kernel() {
        let x = t3([1, 1, 3], &[1.0, 2.0, 3.0]);
        let w = t3([1, 1, 3], &[1.0, 0.0, -1.0]);
        let (y, _) = conv1d(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[-2.0]);
    }

    #[test]
    fn conv_halves_length_with_same_padding() {
        let x = Tensor::zeros(&[1, 2, 800]);
        let w = Tensor::zeros(&[4, 2, 61]);
        let (y, _) = conv1d(&x, &w, &Tensor::zeros(&[4]), 2, 30).unwrap();
        assert_eq!(y.shape(), &[1, 4, 400]);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::zeros(&[1, 2, 5]);
        assert!(conv1d(&x, &Tensor::zeros(&[1, 3, 3]), &Tensor::zeros(&[1]), 1, 0).is_err());
        assert!(conv1d(&x, &Tensor::zeros(&[1, 2, 7]), &Tensor::zeros(&[1]), 1, 0).is_err());
        assert!(conv1d(&x, &Tensor::zeros(&[1, 2, 3]), &Tensor::zeros(&[2]), 1, 0).is_err());
    }

    #[test]
    fn batchnorm_constant_input_gives_beta() {
        let x = Tensor::full(&[2, 2, 3], 7.5);
        let gamma = Tensor::vector(vec![3.0, -1.0]);
        let beta = Tensor::vector(vec![0.25, -4.0]);
        let (y, _, _) =
            batchnorm1d(&x, &gamma, &beta, &RunningStats::identity(2), Mode::Train, BN_EPS, BN_MOMENTUM).unwrap();
        for s in 0..2 {
            assert!(y.data()[s * 6..s * 6 + 3].iter().all(|&v| v == 0.25));
            assert!(y.data()[s * 6 + 3..s * 6 + 6].iter().all(|&v| v == -4.0));
        }
    }

    #[test]
    fn batchnorm_two_values_map_to_unit() {
        let x = t3([1, 1, 2], &[1.0, 3.0]);
        let (y, _, stats) = batchnorm1d(
            &x,
            &Tensor::vector(vec![1.0]),
            &Tensor::vector(vec![0.0]),
            &RunningStats::identity(1),
            Mode::Train,
            0.0,
            BN_MOMENTUM,
        )
        .unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
        // mean 2, population variance 1
        assert!((stats.mean[0] - 0.2).abs() < 1e-15);
        assert!((stats.var[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let x = t3([1, 1, 2], &[1.0, 3.0]);
        let running = RunningStats {
            mean: vec![1.0],
            var: vec![4.0],
        };
        let (y, _, after) =
            batchnorm1d(&x, &Tensor::vector(vec![1.0]), &Tensor::vector(vec![0.0]), &running, Mode::Eval, 0.0, 0.1)
                .unwrap();
        assert_eq!(y.data(), &[0.0, 1.0]);
        assert_eq!(after, running);
    }

    #[test]
    fn batchnorm_train_rejects_single_value() {
        let x = t3([1, 1, 1], &[1.0]);
        let r = batchnorm1d(
            &x,
            &Tensor::vector(vec![1.0]),
            &Tensor::vector(vec![0.0]),
            &RunningStats::identity(1),
            Mode::Train,
            BN_EPS,
            BN_MOMENTUM,
        );
        assert!(r.is_err());
    }

    #[test]
    fn relu_examples() {
        let (y, _) = relu(&Tensor::vector(vec![-1.0, 0.0, 2.0]));
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let (y, _) = relu(&Tensor::vector(vec![-3.0, -0.5]));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maxpool_examples() {
        let x = t3([1, 1, 4], &[1.0, 3.0, 2.0, 5.0]);
        let (y, _) = maxpool1d(&x, 3, 2, 1).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0]);

        let (y, _) = maxpool1d(&Tensor::zeros(&[1, 1, 100]), 3, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 50]);

        let (y, _) = maxpool1d(&Tensor::full(&[2, 3, 9], 4.0), 3, 2, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn maxpool_backward_routes_to_argmax() {
        let x = t3([1, 1, 4], &[1.0, 3.0, 2.0, 5.0]);
        let (_, cache) = maxpool1d(&x, 3, 2, 1).unwrap();
        let g = maxpool1d_backward(&cache, &t3([1, 1, 2], &[10.0, 20.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 10.0, 0.0, 20.0]);
    }

    #[test]
    fn maxpool_rejects_oversized_pad() {
        assert!(maxpool1d(&Tensor::zeros(&[1, 1, 4]), 3, 2, 3).is_err());
    }

    #[test]
    fn linear_examples() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = linear(&x, &w, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0]);

        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::new(vec![1, 2], vec![-0.5, 8.0]).unwrap();
        let (y, _) = linear(&x, &eye, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y.data(), x.data());

        let (y, _) = linear(&Tensor::zeros(&[3, 6400]), &Tensor::zeros(&[6400, 2]), &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
    }

    #[test]
    fn loss_equal_logits() {
        let logits = Tensor::new(vec![2, 2], vec![0.3, 0.3, -1.0, -1.0]).unwrap();
        let out = softmax_cross_entropy(&logits, &[GENUINE, GENUINE]).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(out.grad_logits.data(), &[0.25, -0.25, 0.25, -0.25]);
    }

    #[test]
    fn loss_two_logit_margin() {
        let logits = Tensor::new(vec![1, 2], vec![0.0, 2.0]).unwrap();
        let out = softmax_cross_entropy(&logits, &[GENUINE]).unwrap();
        let e2 = 2f64.exp();
        let p = e2 / (1.0 + e2);
        assert!((out.prob_genuine[0] - p).abs() < 1e-15);
        assert!((out.prob_genuine[0] - 0.8808).abs() < 1e-4);
        assert!((out.loss + p.ln()).abs() < 1e-15);
        assert!((out.loss - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn loss_vanishes_with_large_margin() {
        let logits = Tensor::new(vec![1, 2], vec![0.0, 800.0]).unwrap();
        let out = softmax_cross_entropy(&logits, &[GENUINE]).unwrap();
        assert_eq!(out.loss, 0.0);
        // and the floor keeps the wrong-label loss finite
        let out = softmax_cross_entropy(&logits, &[FORGED]).unwrap();
        assert!(out.loss.is_finite());
    }

    #[test]
    fn loss_rejects_bad_labels() {
        let logits = Tensor::zeros(&[1, 2]);
        assert!(softmax_cross_entropy(&logits, &[2]).is_err());
        assert!(softmax_cross_entropy(&logits, &[0, 1]).is_err());
    }

    fn small_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..5.0, len)
    }

    proptest! {
        #[test]
        fn conv_matches_direct_summation(
            (len, k, stride, pad) in (1usize..20, 1usize..6, 1usize..4, 0usize..4)
                .prop_filter("kernel fits", |(l, k, _, p)| *k <= l + 2 * p),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::from_fn(&[2, 2, len], |_| rng.random_range(-1.0..1.0));
            let w = Tensor::from_fn(&[3, 2, k], |_| rng.random_range(-1.0..1.0));
            let b = Tensor::from_fn(&[3], |_| rng.random_range(-1.0..1.0));
            let (y, _) = conv1d(&x, &w, &b, stride, pad).unwrap();
            let expected_len = (len + 2 * pad - k) / stride + 1;
            prop_assert_eq!(y.shape(), &[2, 3, expected_len]);
            let reference = conv_reference(&x, &w, &b, stride, pad);
            prop_assert_eq!(reference.len(), y.len());
            for (a, r) in y.data().iter().zip(&reference) {
                prop_assert!((a - r).abs() < 1e-12);
            }
        }

        #[test]
        fn relu_is_idempotent_and_matches_abs_form(xs in small_vec(16)) {
            let x = Tensor::vector(xs);
            let (once, _) = relu(&x);
            let (twice, _) = relu(&once);
            prop_assert_eq!(once.data(), twice.data());
            for (y, v) in once.data().iter().zip(x.data()) {
                prop_assert_eq!(*y, (v + v.abs()) / 2.0);
            }
        }

        #[test]
        fn maxpool_outputs_come_from_windows_and_are_monotone(
            xs in small_vec(12),
            bumps in prop::collection::vec(0.0f64..2.0, 12),
        ) {
            let x = Tensor::new(vec![1, 1, 12], xs.clone()).unwrap();
            let y_in = Tensor::new(vec![1, 1, 12], xs.iter().zip(&bumps).map(|(a, b)| a + b).collect()).unwrap();
            let (px, _) = maxpool1d(&x, 3, 2, 1).unwrap();
            let (py, _) = maxpool1d(&y_in, 3, 2, 1).unwrap();
            for (t, v) in px.data().iter().enumerate() {
                let lo = (2 * t).saturating_sub(1);
                let hi = (2 * t + 2).min(12);
                prop_assert!(xs[lo..hi].contains(v));
            }
            for (a, b) in px.data().iter().zip(py.data()) {
                prop_assert!(a <= b);
            }
        }

        #[test]
        fn softmax_rows_and_gradients_sum_correctly(
            logits in small_vec(8),
            labels in prop::collection::vec(0usize..2, 4),
        ) {
            let t = Tensor::new(vec![4, 2], logits).unwrap();
            let out = softmax_cross_entropy(&t, &labels).unwrap();
            let p = softmax(&t).unwrap();
            for row in p.data().chunks(2) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            for row in out.grad_logits.data().chunks(2) {
                prop_assert!(row.iter().sum::<f64>().abs() < 1e-12);
            }
        }

        #[test]
        fn batchnorm_train_output_is_standardized(xs in small_vec(24), shift in -100.0f64..100.0) {
            let x = Tensor::new(vec![3, 2, 4], xs.iter().map(|v| v + shift).collect()).unwrap();
            let (y, _, _) = batchnorm1d(
                &x,
                &Tensor::vector(vec![1.0, 1.0]),
                &Tensor::vector(vec![0.0, 0.0]),
                &RunningStats::identity(2),
                Mode::Train,
                BN_EPS,
                BN_MOMENTUM,
            )
            .unwrap();
            let xv = x.data();
            for ch in 0..2 {
                let vals: Vec<f64> = (0..3).flat_map(|s| y.data()[(s * 2 + ch) * 4..][..4].to_vec()).collect();
                let raw: Vec<f64> = (0..3).flat_map(|s| xv[(s * 2 + ch) * 4..][..4].to_vec()).collect();
                let m = vals.iter().sum::<f64>() / 12.0;
                let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 12.0;
                let rm = raw.iter().sum::<f64>() / 12.0;
                let rv = raw.iter().map(|a| (a - rm) * (a - rm)).sum::<f64>() / 12.0;
                prop_assert!(m.abs() < 1e-8);
                prop_assert!((v - rv / (rv + BN_EPS)).abs() < 1e-6);
            }
        }
    }
}
