//! Update rules and mini-batch scheduling.
//!
//! Losses are mean-reduced over the batch, so `sgd_step` applies the plain
//! `w <- w - lr * g` rule with no further division by the batch size.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradients, ModelParams};
use crate::seed;
use crate::tensor::Tensor;

pub const ADAMAX_BETA1: f64 = 0.9;
pub const ADAMAX_BETA2: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adamax,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adamax" => Ok(Self::Adamax),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

fn check_shapes(params: &ModelParams, grads: &Gradients) -> Result<Vec<usize>> {
    let idx = params.trainable_indices();
    if idx.len() != grads.tensors().len() {
        return Err(Error::Shape(format!(
            "{} trainable tensors but {} gradients",
            idx.len(),
            grads.tensors().len()
        )));
    }
    for (&i, g) in idx.iter().zip(grads.tensors()) {
        if params.tensors()[i].shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} does not match parameter {:?}",
                g.shape(),
                params.tensors()[i].shape()
            )));
        }
    }
    Ok(idx)
}

/// `w <- w - lr * g` for every trainable tensor. Running statistics are untouched.
pub fn sgd_step(params: &ModelParams, grads: &Gradients, lr: f64) -> Result<ModelParams> {
    let mut out = params.clone();
    sgd_update(&mut out, grads, lr)?;
    Ok(out)
}

pub(crate) fn sgd_update(params: &mut ModelParams, grads: &Gradients, lr: f64) -> Result<()> {
    let idx = check_shapes(params, grads)?;
    for (&i, g) in idx.iter().zip(grads.tensors()) {
        for (w, gv) in params.tensors_mut()[i].data_mut().iter_mut().zip(g.data()) {
            *w -= lr * gv;
        }
    }
    Ok(())
}

/// Adamax moments for every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamaxState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Number of steps taken so far.
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    /// Exponentially weighted infinity norm; never negative.
    pub inf_norm: Vec<Tensor>,
}

impl AdamaxState {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .trainable_indices()
            .into_iter()
            .map(|i| Tensor::zeros(params.tensors()[i].shape()))
            .collect();
        Self {
            lr,
            beta1: ADAMAX_BETA1,
            beta2: ADAMAX_BETA2,
            step: 0,
            first_moment: zeros.clone(),
            inf_norm: zeros,
        }
    }
}

/// One Adamax step. Elements whose infinity norm is still zero (every
/// gradient so far was zero there) are left unchanged.
pub fn adamax_step(state: &AdamaxState, params: &ModelParams, grads: &Gradients) -> Result<(AdamaxState, ModelParams)> {
    let mut state = state.clone();
    let mut params = params.clone();
    adamax_update(&mut state, &mut params, grads)?;
    Ok((state, params))
}

pub(crate) fn adamax_update(state: &mut AdamaxState, params: &mut ModelParams, grads: &Gradients) -> Result<()> {
    let idx = check_shapes(params, grads)?;
    if state.first_moment.len() != idx.len() || state.inf_norm.len() != idx.len() {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    state.step += 1;
    let step_size = state.lr / (1.0 - state.beta1.powi(state.step as i32));
    let (b1, b2) = (state.beta1, state.beta2);
    for (k, (&i, g)) in idx.iter().zip(grads.tensors()).enumerate() {
        let m = state.first_moment[k].data_mut();
        let u = state.inf_norm[k].data_mut();
        if m.len() != g.len() || u.len() != g.len() {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        let w = params.tensors_mut()[i].data_mut();
        for e in 0..g.len() {
            let gv = g.data()[e];
            m[e] = b1 * m[e] + (1.0 - b1) * gv;
            u[e] = (b2 * u[e]).max(gv.abs());
            if u[e] > 0.0 {
                w[e] -= step_size * m[e] / u[e];
            }
        }
    }
    Ok(())
}

/// Optimizer with its running state, for training loops.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adamax(AdamaxState),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ModelParams) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adamax => Optimizer::Adamax(AdamaxState::new(params, lr)),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) -> Result<()> {
        match self {
            Optimizer::Sgd { lr } => sgd_update(params, grads, *lr),
            Optimizer::Adamax(state) => adamax_update(state, params, grads),
        }
    }
}

/// Shuffles `0..n` with a stream seeded by `(seed, epoch)` and cuts it into
/// contiguous batches of `batch_size`; the last batch may be shorter.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Dataset("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng_for(seed, &[epoch]));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn scalar_setup(w: f64, g: f64) -> (ModelParams, Gradients) {
        let cfg = ModelConfig::shrunken();
        let mut p = ModelParams::init(&cfg).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().fill(w);
        }
        let mut grads = Gradients::zeros_like(&p);
        for t in grads.tensors_mut() {
            t.data_mut().fill(g);
        }
        (p, grads)
    }

    #[test]
    fn sgd_zero_gradient_is_identity() {
        let (p, g) = scalar_setup(0.3, 0.0);
        assert_eq!(sgd_step(&p, &g, 0.1).unwrap(), p);
    }

    #[test]
    fn sgd_single_step_arithmetic() {
        let (p, g) = scalar_setup(1.0, 0.5);
        let out = sgd_step(&p, &g, 0.1).unwrap();
        for (spec, t) in out.iter() {
            let expected = if spec.role.is_trainable() { 0.95 } else { 1.0 };
            assert!(t.data().iter().all(|&v| (v - expected).abs() < 1e-15), "{}", spec.name);
        }
    }

    #[test]
    fn sgd_shape_mismatch() {
        let (p, _) = scalar_setup(1.0, 0.5);
        let other = ModelParams::init(&ModelConfig::desk()).unwrap();
        let g = Gradients::zeros_like(&other);
        assert!(sgd_step(&p, &g, 0.1).is_err());
    }

    #[test]
    fn adamax_zero_gradient_from_fresh_state() {
        let (p, g) = scalar_setup(0.7, 0.0);
        let state = AdamaxState::new(&p, 0.01);
        let (state, out) = adamax_step(&state, &p, &g).unwrap();
        assert_eq!(out, p);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adamax_first_step_moves_by_lr() {
        let (p, g) = scalar_setup(1.0, 1.0);
        let state = AdamaxState::new(&p, 0.01);
        let (state, out) = adamax_step(&state, &p, &g).unwrap();
        assert!((state.first_moment[0].data()[0] - 0.1).abs() < 1e-15);
        assert_eq!(state.inf_norm[0].data()[0], 1.0);
        for (spec, t) in out.iter() {
            if spec.role.is_trainable() {
                assert!(t.data().iter().all(|&v| (v - 0.99).abs() < 1e-15));
            }
        }
    }

    #[test]
    fn batches_cover_the_epoch() {
        let b = make_batches(480, 32, 3, 0).unwrap();
        assert_eq!(b.len(), 15);
        assert!(b.iter().all(|x| x.len() == 32));
        assert_eq!(make_batches(10, 64, 3, 0).unwrap().len(), 1);
        assert_eq!(make_batches(10, 4, 3, 1).unwrap(), make_batches(10, 4, 3, 1).unwrap());
        assert_ne!(make_batches(50, 4, 3, 1).unwrap(), make_batches(50, 4, 3, 2).unwrap());
        let tail = make_batches(10, 4, 3, 0).unwrap();
        assert_eq!(tail.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert!(make_batches(0, 4, 3, 0).is_err());
        assert!(make_batches(4, 0, 3, 0).is_err());
    }

    proptest! {
        #[test]
        fn batches_partition_samples(n in 1usize..300, bs in 1usize..64, seed in any::<u64>(), epoch in 0u64..10) {
            let batches = make_batches(n, bs, seed, epoch).unwrap();
            let mut seen: Vec<usize> = batches.concat();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn sgd_steps_compose_linearly(lr1 in 0.0f64..1.0, lr2 in 0.0f64..1.0, g in -2.0f64..2.0) {
            let (p, grads) = scalar_setup(0.5, g);
            let two = sgd_step(&sgd_step(&p, &grads, lr1).unwrap(), &grads, lr2).unwrap();
            let one = sgd_step(&p, &grads, lr1 + lr2).unwrap();
            for (a, b) in two.flatten().iter().zip(one.flatten()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn adamax_norm_tracks_latest_gradient(gs in prop::collection::vec(-3.0f64..3.0, 1..30)) {
            let (p, _) = scalar_setup(0.0, 0.0);
            let mut state = AdamaxState::new(&p, 0.01);
            let mut params = p.clone();
            let mut prev_u = 0.0;
            for g in gs {
                let mut grads = Gradients::zeros_like(&p);
                for t in grads.tensors_mut() {
                    t.data_mut().fill(g);
                }
                adamax_update(&mut state, &mut params, &grads).unwrap();
                let u = state.inf_norm[0].data()[0];
                prop_assert!(u >= 0.0);
                prop_assert!(u >= g.abs());
                prop_assert!(u >= ADAMAX_BETA2 * prev_u);
                prev_u = u;
            }
        }
    }
}
