//! The verification network: three `conv -> batch-norm -> relu` blocks,
//! a max-pool, and a linear head producing two logits.
//!
//! Each conv block uses stride 2 with symmetric padding `(k - 1) / 2`, which
//! halves the sequence length exactly. With the default configuration the
//! length trace is 800 -> 400 -> 200 -> 100 -> 50 and the head maps
//! `128 * 50 = 6400` features to 2 logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, LayerCache, Mode, RunningStats, BN_EPS, BN_MOMENTUM};
use crate::tensor::Tensor;

pub const NUM_BLOCKS: usize = 3;
const TENSORS_PER_BLOCK: usize = 6;
// Upper bound on the scalar count accepted from configs and checkpoints.
const MAX_PARAMS: usize = 1 << 28;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kernel_size: usize,
    pub channel_widths: [usize; NUM_BLOCKS],
    pub input_channels: usize,
    pub max_length: usize,
    pub pool_window: usize,
    pub pool_stride: usize,
    pub pool_pad: usize,
    pub conv_stride: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kernel_size: 61,
            channel_widths: [32, 64, 128],
            input_channels: 2,
            max_length: 800,
            pool_window: 3,
            pool_stride: 2,
            pool_pad: 1,
            conv_stride: 2,
            num_classes: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small network used by gradient checks.
    pub fn shrunken() -> Self {
        Self {
            kernel_size: 3,
            channel_widths: [2, 3, 4],
            max_length: 16,
            ..Self::default()
        }
    }

    /// Desk-scale network used by the quick experiment presets.
    pub fn desk() -> Self {
        Self {
            kernel_size: 9,
            channel_widths: [4, 8, 16],
            max_length: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return bad(format!("kernel_size must be odd and positive, got {}", self.kernel_size));
        }
        if self.channel_widths.contains(&0) || self.input_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.conv_stride != 2 {
            return bad(format!("conv_stride must be 2, got {}", self.conv_stride));
        }
        if self.max_length == 0 || self.max_length % (1 << NUM_BLOCKS) != 0 {
            return bad(format!("max_length must be a positive multiple of 8, got {}", self.max_length));
        }
        if self.num_classes != 2 {
            return bad(format!("num_classes must be 2, got {}", self.num_classes));
        }
        if self.pool_stride == 0 || self.pool_window == 0 || self.pool_pad >= self.pool_window {
            return bad("pool needs positive window and stride with pad < window".into());
        }
        if self.pooled_length().is_none() {
            return bad("pool window does not fit the final feature length".into());
        }
        match self.checked_param_count() {
            Some(n) if n <= MAX_PARAMS => Ok(()),
            _ => bad("parameter count too large".into()),
        }
    }

    pub fn conv_pad(&self) -> usize {
        (self.kernel_size - 1) / 2
    }

    /// Sequence lengths after each conv block.
    pub fn block_lengths(&self) -> [usize; NUM_BLOCKS] {
        let mut out = [0; NUM_BLOCKS];
        let mut len = self.max_length;
        for slot in &mut out {
            len /= 2;
            *slot = len;
        }
        out
    }

    pub fn pooled_length(&self) -> Option<usize> {
        layers::sliding_output_len(
            self.block_lengths()[NUM_BLOCKS - 1],
            self.pool_window,
            self.pool_stride,
            self.pool_pad,
        )
    }

    /// Input dimension of the linear head.
    pub fn linear_input_dim(&self) -> usize {
        self.channel_widths[NUM_BLOCKS - 1] * self.pooled_length().unwrap_or(0)
    }

    /// Canonical ordered layout of every parameter tensor.
    pub fn param_layout(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::with_capacity(NUM_BLOCKS * TENSORS_PER_BLOCK + 2);
        let mut c_in = self.input_channels;
        for (b, &c_out) in self.channel_widths.iter().enumerate() {
            let mut push = |suffix: &str, shape: Vec<usize>, role: ParamRole| {
                specs.push(ParamSpec {
                    name: format!("block{b}.{suffix}"),
                    shape,
                    role,
                })
            };
            push("conv.weight", vec![c_out, c_in, self.kernel_size], ParamRole::ConvWeight);
            push("conv.bias", vec![c_out], ParamRole::ConvBias);
            push("bn.gamma", vec![c_out], ParamRole::BnGamma);
            push("bn.beta", vec![c_out], ParamRole::BnBeta);
            push("bn.running_mean", vec![c_out], ParamRole::BnRunningMean);
            push("bn.running_var", vec![c_out], ParamRole::BnRunningVar);
            c_in = c_out;
        }
        specs.push(ParamSpec {
            name: "linear.weight".into(),
            shape: vec![self.linear_input_dim(), self.num_classes],
            role: ParamRole::LinearWeight,
        });
        specs.push(ParamSpec {
            name: "linear.bias".into(),
            shape: vec![self.num_classes],
            role: ParamRole::LinearBias,
        });
        specs
    }

    /// Total scalar count of all parameter tensors, running statistics included.
    pub fn param_count(&self) -> usize {
        self.checked_param_count().expect("parameter count overflows usize")
    }

    fn checked_param_count(&self) -> Option<usize> {
        let mut total = 0usize;
        let mut c_in = self.input_channels;
        for &c_out in &self.channel_widths {
            let conv = c_out.checked_mul(c_in)?.checked_mul(self.kernel_size)?;
            total = total.checked_add(conv)?.checked_add(c_out.checked_mul(5)?)?;
            c_in = c_out;
        }
        let head = c_in
            .checked_mul(self.pooled_length()?)?
            .checked_mul(self.num_classes)?
            .checked_add(self.num_classes)?;
        total.checked_add(head)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
    LinearWeight,
    LinearBias,
}

impl ParamRole {
    /// Whether the tensor is updated by gradient steps. Running statistics are not.
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamRole::BnRunningMean | ParamRole::BnRunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

/// All model tensors in canonical order, tied to the config that shaped them.
///
/// This is the unit exchanged between agents and the coordinator.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Seeded initialization: conv and linear weights uniform in `+-sqrt(1/fan_in)`,
    /// zero biases, identity batch-norm.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tensors = config
            .param_layout()
            .iter()
            .map(|spec| match spec.role {
                ParamRole::ConvWeight => {
                    let fan_in = (spec.shape[1] * spec.shape[2]) as f64;
                    uniform(&spec.shape, (1.0 / fan_in).sqrt(), &mut rng)
                }
                ParamRole::LinearWeight => {
                    let fan_in = spec.shape[0] as f64;
                    uniform(&spec.shape, (1.0 / fan_in).sqrt(), &mut rng)
                }
                ParamRole::BnGamma | ParamRole::BnRunningVar => Tensor::full(&spec.shape, 1.0),
                ParamRole::ConvBias | ParamRole::BnBeta | ParamRole::BnRunningMean | ParamRole::LinearBias => {
                    Tensor::zeros(&spec.shape)
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.param_layout();
        if layout.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for (spec, t) in layout.iter().zip(&tensors) {
            if spec.shape != t.shape() {
                return Err(Error::Shape(format!(
                    "{}: expected shape {:?}, got {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// `(spec, tensor)` pairs in canonical order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamSpec, &Tensor)> {
        self.config.param_layout().into_iter().zip(self.tensors.iter())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.iter().find(|(spec, _)| spec.name == name).map(|(_, t)| t)
    }

    /// Every scalar in canonical order: tensors in layout order, each row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.config.param_count());
        for t in &self.tensors {
            flat.extend_from_slice(t.data());
        }
        flat
    }

    pub fn unflatten(flat: &[f64], config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let expected = config.param_count();
        if flat.len() != expected {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} values, config needs {expected}",
                flat.len()
            )));
        }
        let mut offset = 0;
        let tensors = config
            .param_layout()
            .into_iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                let t = Tensor::new(spec.shape, flat[offset..offset + n].to_vec());
                offset += n;
                t
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Running statistics of each batch-norm layer.
    pub fn running_stats(&self) -> Vec<RunningStats> {
        (0..NUM_BLOCKS)
            .map(|b| RunningStats {
                mean: self.tensors[block_index(b, BN_RUNNING_MEAN)].data().to_vec(),
                var: self.tensors[block_index(b, BN_RUNNING_VAR)].data().to_vec(),
            })
            .collect()
    }

    pub fn set_running_stats(&mut self, stats: &[RunningStats]) -> Result<()> {
        if stats.len() != NUM_BLOCKS {
            return Err(Error::Shape(format!("expected {NUM_BLOCKS} running stats, got {}", stats.len())));
        }
        for (b, s) in stats.iter().enumerate() {
            let width = self.config.channel_widths[b];
            if s.mean.len() != width || s.var.len() != width {
                return Err(Error::Shape(format!("block {b}: running stats do not have {width} channels")));
            }
            self.tensors[block_index(b, BN_RUNNING_MEAN)]
                .data_mut()
                .copy_from_slice(&s.mean);
            self.tensors[block_index(b, BN_RUNNING_VAR)]
                .data_mut()
                .copy_from_slice(&s.var);
        }
        Ok(())
    }

    /// Indices into `tensors()` of the trainable tensors, in order.
    pub fn trainable_indices(&self) -> Vec<usize> {
        self.config
            .param_layout()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.role.is_trainable())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

const CONV_WEIGHT: usize = 0;
const CONV_BIAS: usize = 1;
const BN_GAMMA: usize = 2;
const BN_BETA: usize = 3;
const BN_RUNNING_MEAN: usize = 4;
const BN_RUNNING_VAR: usize = 5;
const LINEAR_WEIGHT: usize = NUM_BLOCKS * TENSORS_PER_BLOCK;
const LINEAR_BIAS: usize = LINEAR_WEIGHT + 1;

fn block_index(block: usize, slot: usize) -> usize {
    block * TENSORS_PER_BLOCK + slot
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Gradients of the mean loss for every trainable tensor, in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let (names, tensors) = params
            .iter()
            .filter(|(spec, _)| spec.role.is_trainable())
            .map(|(spec, t)| (spec.name, Tensor::zeros(t.shape())))
            .unzip();
        Self { names, tensors }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}

/// A preprocessed mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[N, channels, max_length]`
    pub inputs: Tensor,
    /// Class index per sample: 0 forged, 1 genuine.
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        let (n, _, _) = inputs.dims3("batch inputs")?;
        if n == 0 || labels.len() != n {
            return Err(Error::Shape(format!("batch of {n} inputs has {} labels", labels.len())));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Shape("labels must be 0 or 1".into()));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    mode: Mode,
    layers: Vec<LayerCache>,
    lengths: Vec<usize>,
    batch_size: usize,
}

impl ForwardCache {
    /// Sequence length after each conv block followed by the pooled length.
    pub fn length_trace(&self) -> &[usize] {
        &self.lengths
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn layers(&self) -> &[LayerCache] {
        &self.layers
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[N, 2]`
    pub logits: Tensor,
    pub cache: ForwardCache,
    /// Batch-norm running statistics after this pass (unchanged in eval mode).
    pub running_stats: Vec<RunningStats>,
}

pub fn forward(params: &ModelParams, inputs: &Tensor, mode: Mode) -> Result<ForwardOutput> {
    let cfg = &params.config;
    let (n, c, len) = inputs.dims3("model input")?;
    if c != cfg.input_channels || len != cfg.max_length {
        return Err(Error::Shape(format!(
            "model expects [N, {}, {}] input, got {:?}",
            cfg.input_channels,
            cfg.max_length,
            inputs.shape()
        )));
    }
    let p = &params.tensors;
    let running = params.running_stats();
    let mut layers = Vec::with_capacity(NUM_BLOCKS * 3 + 2);
    let mut lengths = Vec::with_capacity(NUM_BLOCKS + 1);
    let mut new_stats = Vec::with_capacity(NUM_BLOCKS);

    let mut x = inputs.clone();
    for (b, stats) in running.iter().enumerate() {
        let (y, conv_cache) = layers::conv1d(
            &x,
            &p[block_index(b, CONV_WEIGHT)],
            &p[block_index(b, CONV_BIAS)],
            cfg.conv_stride,
            cfg.conv_pad(),
        )?;
        let (y, bn_cache, updated) = layers::batchnorm1d(
            &y,
            &p[block_index(b, BN_GAMMA)],
            &p[block_index(b, BN_BETA)],
            stats,
            mode,
            BN_EPS,
            BN_MOMENTUM,
        )?;
        let (y, relu_cache) = layers::relu(&y);
        lengths.push(y.shape()[2]);
        layers.push(LayerCache::Conv1d(conv_cache));
        layers.push(LayerCache::BatchNorm(bn_cache));
        layers.push(LayerCache::Relu(relu_cache));
        new_stats.push(updated);
        x = y;
    }

    let (pooled, pool_cache) = layers::maxpool1d(&x, cfg.pool_window, cfg.pool_stride, cfg.pool_pad)?;
    lengths.push(pooled.shape()[2]);
    layers.push(LayerCache::MaxPool(pool_cache));

    // channel-major flatten: feature index = channel * pooled_len + position
    let features = pooled.reshape(vec![n, cfg.linear_input_dim()])?;
    let (logits, lin_cache) = layers::linear(&features, &p[LINEAR_WEIGHT], &p[LINEAR_BIAS])?;
    layers.push(LayerCache::Linear(lin_cache));

    Ok(ForwardOutput {
        logits,
        cache: ForwardCache {
            mode,
            layers,
            lengths,
            batch_size: n,
        },
        running_stats: new_stats,
    })
}

/// Reverse-mode gradients of whatever loss produced `grad_logits`.
pub fn backward(params: &ModelParams, cache: &ForwardCache, grad_logits: &Tensor) -> Result<Gradients> {
    let cfg = &params.config;
    if cache.layers.len() != NUM_BLOCKS * 3 + 2 || cache.lengths.len() != NUM_BLOCKS + 1 {
        return Err(Error::Shape("forward cache does not come from this model".into()));
    }
    if grad_logits.shape() != [cache.batch_size, cfg.num_classes] {
        return Err(Error::Shape(format!(
            "gradient of logits has shape {:?}, expected [{}, {}]",
            grad_logits.shape(),
            cache.batch_size,
            cfg.num_classes
        )));
    }
    let p = &params.tensors;
    let mut grads = Gradients::zeros_like(params);
    // gradient slots follow the trainable layout: 4 per block, then linear
    let slot = |b: usize, k: usize| b * 4 + k;
    let lin_slot = NUM_BLOCKS * 4;

    let mut rev = cache.layers.iter().rev();
    let LayerCache::Linear(lin_cache) = rev.next().expect("linear cache") else {
        return Err(cache_mismatch("linear"));
    };
    let lin = layers::linear_backward(lin_cache, &p[LINEAR_WEIGHT], grad_logits)?;
    grads.tensors[lin_slot] = lin.weight;
    grads.tensors[lin_slot + 1] = lin.bias;

    let pooled_len = cache.lengths[NUM_BLOCKS];
    let last_width = cfg.channel_widths[NUM_BLOCKS - 1];
    let mut g = lin
        .input
        .reshape(vec![cache.batch_size, last_width, pooled_len])?;

    let LayerCache::MaxPool(pool_cache) = rev.next().expect("pool cache") else {
        return Err(cache_mismatch("maxpool"));
    };
    g = layers::maxpool1d_backward(pool_cache, &g)?;

    for b in (0..NUM_BLOCKS).rev() {
        let (Some(LayerCache::Relu(relu_cache)), Some(LayerCache::BatchNorm(bn_cache)), Some(LayerCache::Conv1d(conv_cache))) =
            (rev.next(), rev.next(), rev.next())
        else {
            return Err(cache_mismatch("conv block"));
        };
        g = layers::relu_backward(relu_cache, &g)?;
        let bn = layers::batchnorm1d_backward(bn_cache, &p[block_index(b, BN_GAMMA)], &g)?;
        grads.tensors[slot(b, 2)] = bn.gamma;
        grads.tensors[slot(b, 3)] = bn.beta;
        let conv = layers::conv1d_backward(conv_cache, &p[block_index(b, CONV_WEIGHT)], &bn.input)?;
        grads.tensors[slot(b, 0)] = conv.weight;
        grads.tensors[slot(b, 1)] = conv.bias;
        g = conv.input;
    }
    Ok(grads)
}

fn cache_mismatch(what: &str) -> Error {
    Error::Shape(format!("forward cache out of order at {what}"))
}

/// Result of one loss-and-gradient evaluation on a batch.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub grads: Gradients,
    pub running_stats: Vec<RunningStats>,
}

/// Train-mode forward pass, mean cross-entropy, and backward pass.
pub fn loss_and_gradients(params: &ModelParams, batch: &Batch) -> Result<StepOutput> {
    let fwd = forward(params, &batch.inputs, Mode::Train)?;
    let loss = layers::softmax_cross_entropy(&fwd.logits, &batch.labels)?;
    let grads = backward(params, &fwd.cache, &loss.grad_logits)?;
    Ok(StepOutput {
        loss: loss.loss,
        grads,
        running_stats: fwd.running_stats,
    })
}

/// Mean loss of a batch under the given mode, without gradients.
pub fn batch_loss(params: &ModelParams, batch: &Batch, mode: Mode) -> Result<f64> {
    let fwd = forward(params, &batch.inputs, mode)?;
    Ok(layers::softmax_cross_entropy(&fwd.logits, &batch.labels)?.loss)
}
