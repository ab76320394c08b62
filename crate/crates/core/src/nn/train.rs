use rand::seq::SliceRandom;
use rand::Rng;

use super::loss::softmax_cross_entropy;
use super::network::{LayerMasks, Network};
use super::optim::OptimizerState;
use crate::error::{AfmError, Result};
use crate::matrix::Matrix2D;

const EVAL_CHUNK: usize = 1000;

/// Parameter tensors an update must skip, indexed like
/// [`Network::param_slices_mut`] (`2·layer` weights, `2·layer + 1` bias).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrozenTensors(Vec<bool>);

impl FrozenTensors {
    pub fn none() -> Self {
        Self(Vec::new())
    }

    pub fn freeze_bias(mut self, layer: usize) -> Self {
        self.set(2 * layer + 1);
        self
    }

    pub fn freeze_weights(mut self, layer: usize) -> Self {
        self.set(2 * layer);
        self
    }

    fn set(&mut self, idx: usize) {
        if self.0.len() <= idx {
            self.0.resize(idx + 1, false);
        }
        self.0[idx] = true;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

/// Shuffled visiting order for one epoch.
pub fn batch_order<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// One epoch of minibatch softmax cross-entropy training. Returns the mean
/// of the per-batch losses.
#[allow(clippy::too_many_arguments)]
pub fn train_classifier_epoch<R: Rng + ?Sized>(
    net: &mut Network,
    opt: &mut OptimizerState,
    x: &Matrix2D,
    labels: &[usize],
    masks: &LayerMasks<'_>,
    batch_size: usize,
    frozen: &FrozenTensors,
    rng: &mut R,
) -> Result<f64> {
    if batch_size == 0 {
        return Err(AfmError::Config("batch size must be positive".into()));
    }
    if x.rows() != labels.len() {
        return Err(AfmError::Consistency(format!("{} rows vs {} labels", x.rows(), labels.len())));
    }
    let order = batch_order(x.rows(), rng);
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(batch_size) {
        let xb = x.select_rows(chunk);
        let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let cache = net.forward(&xb, masks)?;
        let (loss, grad) = softmax_cross_entropy(cache.output(), &yb)?;
        let grads = net.backward(&cache, &grad)?;
        opt.step_with_frozen(&mut net.param_slices_mut(), &grads.slices(), frozen.as_slice())?;
        total += loss;
        batches += 1;
    }
    if !net.is_finite() {
        return Err(AfmError::Numeric("network parameters after epoch".into()));
    }
    Ok(total / batches.max(1) as f64)
}

/// Fraction of rows whose argmax output matches the label.
pub fn accuracy(net: &Network, x: &Matrix2D, labels: &[usize], masks: &LayerMasks<'_>) -> Result<f64> {
    if x.rows() != labels.len() {
        return Err(AfmError::Consistency(format!("{} rows vs {} labels", x.rows(), labels.len())));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..x.rows()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let out = net.predict(&x.select_rows(chunk), masks)?;
        correct += out
            .argmax_rows()
            .iter()
            .zip(chunk)
            .filter(|(p, &i)| **p == labels[i])
            .count();
    }
    Ok(correct as f64 / labels.len() as f64)
}
