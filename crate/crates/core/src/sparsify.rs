//! Sparse variational dropout on the forgetting layer and neuron-mask
//! extraction from the learned per-weight dropout rates.
//!
//! Each incoming weight of the hidden layer is Gaussian with mean `θ_ij` and
//! variance `σ²_ij`; `α_ij = σ²_ij / θ²_ij`. Training uses the local
//! reparameterization: pre-activations are sampled directly from
//! `N(x·θ + b, (x∘x)·σ²)`, one draw per (row, unit). The objective is the
//! negative SGVB lower bound with the log-uniform-prior KL approximation.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{AfmError, Result};
use crate::mask::NeuronMask;
use crate::matrix::Matrix2D;
use crate::nn::{self, softmax_nll_sum, ForgettingLayer, Gradients, Network, OptimizerState};

pub const K1: f64 = 0.63576;
pub const K2: f64 = 1.87320;
pub const K3: f64 = 1.48695;

/// Bound on `log α` inside the training objective; outside it the KL
/// gradient is negligible and the ratio itself is numerically unreliable.
pub const LOG_ALPHA_CLIP: f64 = 10.0;

/// `log σ²` that makes `σ² = exp(log σ²)` exactly zero in `f64`.
pub const ZERO_VARIANCE_LOG_SIGMA2: f64 = -1000.0;

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Negative KL divergence of one weight's posterior from the log-uniform
/// prior, up to an additive constant (taken as 0):
/// `k1·sigmoid(k2 + k3·log α) − 0.5·log(1 + 1/α)`.
pub fn kl_term(log_alpha: f64) -> f64 {
    K1 * nn::sigmoid(K2 + K3 * log_alpha) - 0.5 * softplus(-log_alpha)
}

/// `d kl_term / d log α`.
pub fn kl_term_derivative(log_alpha: f64) -> f64 {
    let s = nn::sigmoid(K2 + K3 * log_alpha);
    K1 * K3 * s * (1.0 - s) + 0.5 * nn::sigmoid(-log_alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalLayer {
    pub theta: Matrix2D,
    pub log_sigma2: Matrix2D,
    pub bias: Vec<f64>,
}

impl VariationalLayer {
    pub fn new(theta: Matrix2D, log_sigma2: Matrix2D, bias: Vec<f64>) -> Result<Self> {
        if theta.shape() != log_sigma2.shape() {
            return Err(AfmError::Shape(format!(
                "theta {:?} vs log_sigma2 {:?}",
                theta.shape(),
                log_sigma2.shape()
            )));
        }
        if bias.len() != theta.cols() {
            return Err(AfmError::Shape(format!("bias {} vs fan_out {}", bias.len(), theta.cols())));
        }
        Ok(Self { theta, log_sigma2, bias })
    }

    /// Means and bias from a deterministic layer, uniform `log σ²`.
    pub fn from_dense(layer: &ForgettingLayer, log_sigma2: f64) -> Self {
        Self {
            theta: layer.weights.clone(),
            log_sigma2: Matrix2D::filled(layer.fan_in(), layer.fan_out(), log_sigma2),
            bias: layer.bias.clone(),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.theta.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.theta.cols()
    }

    /// `log α = log σ² − 2·log|θ|`; `+∞` where `|θ| < 1e-12`.
    pub fn log_alpha(&self, i: usize, j: usize) -> f64 {
        let theta = self.theta.get(i, j).abs();
        if theta < 1e-12 {
            f64::INFINITY
        } else {
            self.log_sigma2.get(i, j) - 2.0 * theta.ln()
        }
    }

    pub fn alpha(&self, i: usize, j: usize) -> f64 {
        self.log_alpha(i, j).exp()
    }

    fn check_finite(&self) -> Result<()> {
        if !self.theta.is_finite() {
            return Err(AfmError::Numeric("variational layer theta".into()));
        }
        if self.log_sigma2.as_slice().iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(AfmError::Numeric("variational layer log_sigma2".into()));
        }
        Ok(())
    }

    /// Sum over all weights of `D_KL(q‖p)` with clipped `log α`, and its
    /// gradients with respect to `θ` and `log σ²`.
    pub fn kl_divergence(&self) -> (f64, Matrix2D, Matrix2D) {
        let (rows, cols) = self.theta.shape();
        let mut d_theta = Matrix2D::zeros(rows, cols);
        let mut d_ls2 = Matrix2D::zeros(rows, cols);
        let mut total = 0.0;
        for i in 0..rows {
            for j in 0..cols {
                let la = self.log_alpha(i, j);
                let clipped = la.clamp(-LOG_ALPHA_CLIP, LOG_ALPHA_CLIP);
                total -= kl_term(clipped);
                if la.abs() < LOG_ALPHA_CLIP {
                    let g = -kl_term_derivative(la);
                    d_ls2.set(i, j, g);
                    d_theta.set(i, j, g * (-2.0 / self.theta.get(i, j)));
                }
            }
        }
        (total, d_theta, d_ls2)
    }
}

/// Pre-activation statistics of one stochastic forward pass.
#[derive(Debug, Clone)]
pub struct VdForward {
    pub x: Matrix2D,
    pub x_sq: Matrix2D,
    pub mean: Matrix2D,
    pub std: Matrix2D,
    pub noise: Matrix2D,
    /// Sampled pre-activations `mean + std·noise`.
    pub pre: Matrix2D,
}

/// Standard-normal noise, one draw per (row, unit), drawn row-major.
pub fn draw_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix2D {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Matrix2D::from_vec(rows, cols, data).expect("noise shape")
}

/// Local-reparameterization forward with explicit noise.
pub fn vd_forward_with_noise(layer: &VariationalLayer, x: &Matrix2D, noise: &Matrix2D) -> Result<VdForward> {
    if x.cols() != layer.fan_in() {
        return Err(AfmError::dim(
            0,
            format!("input has {} columns, variational layer expects {}", x.cols(), layer.fan_in()),
        ));
    }
    if noise.shape() != (x.rows(), layer.fan_out()) {
        return Err(AfmError::Shape(format!(
            "noise {:?} for {} rows x {} units",
            noise.shape(),
            x.rows(),
            layer.fan_out()
        )));
    }
    layer.check_finite()?;
    let mut mean = x.matmul(&layer.theta)?;
    mean.add_row_vector(&layer.bias);
    let x_sq = x.map(|v| v * v);
    let sigma2 = layer.log_sigma2.map(f64::exp);
    let var = x_sq.matmul(&sigma2)?;
    let std = var.map(f64::sqrt);
    let mut pre = mean.clone();
    for ((p, &s), &e) in pre.as_mut_slice().iter_mut().zip(std.as_slice()).zip(noise.as_slice()) {
        *p += s * e;
    }
    if !pre.is_finite() {
        return Err(AfmError::Numeric("variational pre-activations".into()));
    }
    Ok(VdForward {
        x: x.clone(),
        x_sq,
        mean,
        std,
        noise: noise.clone(),
        pre,
    })
}

/// Training-time forward: pre-activations sampled from
/// `N(x·θ + b, (x∘x)·σ²)` with fresh noise from `rng`.
pub fn vd_forward_train<R: Rng + ?Sized>(layer: &VariationalLayer, x: &Matrix2D, rng: &mut R) -> Result<VdForward> {
    let noise = draw_noise(x.rows(), layer.fan_out(), rng);
    vd_forward_with_noise(layer, x, &noise)
}

/// Variational hidden layer (ReLU, maskable) followed by a dense head.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalNet {
    pub hidden: VariationalLayer,
    pub head: Network,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VdGradients {
    pub theta: Matrix2D,
    pub log_sigma2: Matrix2D,
    pub bias: Vec<f64>,
    pub head: Gradients,
}

impl VdGradients {
    /// Flat views ordered like [`VariationalNet::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v = vec![self.theta.as_slice(), self.log_sigma2.as_slice(), self.bias.as_slice()];
        v.extend(self.head.slices());
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgvbLoss {
    /// `(N/M)·Σ NLL + kl_weight·Σ KL`.
    pub loss: f64,
    /// `(N/M)·Σ NLL` over the batch.
    pub likelihood: f64,
    /// `Σ KL` over all variational weights (unweighted).
    pub kl: f64,
}

impl VariationalNet {
    /// Builds from a dense `[in, hidden, out]` network, copying its weights.
    pub fn from_dense(net: &Network, init_log_sigma2: f64) -> Result<Self> {
        if net.layers.len() != 2 {
            return Err(AfmError::Config(format!(
                "variational net needs a two-layer network, got {} layers",
                net.layers.len()
            )));
        }
        Ok(Self {
            hidden: VariationalLayer::from_dense(&net.layers[0], init_log_sigma2),
            head: Network::new(vec![net.layers[1].clone()])?,
        })
    }

    pub fn width(&self) -> usize {
        self.hidden.fan_out()
    }

    /// `[θ, log σ², bias, head w, head b]`.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = vec![
            self.hidden.theta.as_mut_slice(),
            self.hidden.log_sigma2.as_mut_slice(),
            self.hidden.bias.as_mut_slice(),
        ];
        v.extend(self.head.param_slices_mut());
        v
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = vec![
            self.hidden.theta.as_slice(),
            self.hidden.log_sigma2.as_slice(),
            self.hidden.bias.as_slice(),
        ];
        v.extend(self.head.param_slices());
        v
    }

    /// Deterministic network with `θ` as weights (test-time forward).
    pub fn to_dense(&self) -> Result<Network> {
        let hidden = ForgettingLayer::new(self.hidden.theta.clone(), self.hidden.bias.clone(), nn::Activation::ReLU)?;
        let mut layers = vec![hidden];
        layers.extend(self.head.layers.iter().cloned());
        Network::new(layers)
    }

    /// Negative SGVB bound on a minibatch with explicit noise, and its
    /// gradients. `gate` masks hidden neurons (frozen ones are gated out).
    #[allow(clippy::too_many_arguments)]
    pub fn sgvb_objective(
        &self,
        x: &Matrix2D,
        labels: &[usize],
        dataset_size: usize,
        kl_weight: f64,
        noise: &Matrix2D,
        gate: Option<&NeuronMask>,
    ) -> Result<(SgvbLoss, VdGradients)> {
        let m = x.rows();
        if m == 0 {
            return Err(AfmError::Input("empty minibatch".into()));
        }
        if m > dataset_size {
            return Err(AfmError::Input(format!("batch of {m} exceeds dataset size {dataset_size}")));
        }
        if !(0.0..=1.0).contains(&kl_weight) {
            return Err(AfmError::Input(format!("kl_weight {kl_weight} outside [0, 1]")));
        }
        if let Some(g) = gate {
            if g.len() != self.width() {
                return Err(AfmError::dim(0, format!("mask width {} vs layer width {}", g.len(), self.width())));
            }
        }
        let scale = dataset_size as f64 / m as f64;
        let fwd = vd_forward_with_noise(&self.hidden, x, noise)?;
        let mut hidden = fwd.pre.map(|z| z.max(0.0));
        if let Some(g) = gate {
            for r in 0..hidden.rows() {
                for (v, &on) in hidden.row_mut(r).iter_mut().zip(g.bits()) {
                    if !on {
                        *v = 0.0;
                    }
                }
            }
        }
        let head_cache = self.head.forward(&hidden, &[])?;
        let (nll_sum, mut d_logits) = softmax_nll_sum(head_cache.output(), labels)?;
        d_logits.as_mut_slice().iter_mut().for_each(|g| *g *= scale);
        let (head_grads, d_hidden) = self.head.backward_with_input_grad(&head_cache, &d_logits)?;

        let (rows, cols) = fwd.pre.shape();
        let mut d_mean = Matrix2D::zeros(rows, cols);
        let mut d_var = Matrix2D::zeros(rows, cols);
        for r in 0..rows {
            for j in 0..cols {
                let on = gate.is_none_or(|g| g.get(j));
                let z = fwd.pre.get(r, j);
                if !on || z <= 0.0 {
                    continue;
                }
                let d = d_hidden.get(r, j);
                d_mean.set(r, j, d);
                let s = fwd.std.get(r, j);
                if s > 0.0 {
                    d_var.set(r, j, d * fwd.noise.get(r, j) / (2.0 * s));
                }
            }
        }
        let mut d_theta = fwd.x.t_matmul(&d_mean)?;
        let d_bias = d_mean.col_sums();
        let d_sigma2 = fwd.x_sq.t_matmul(&d_var)?;
        let mut d_ls2 = d_sigma2;
        for (g, &ls2) in d_ls2.as_mut_slice().iter_mut().zip(self.hidden.log_sigma2.as_slice()) {
            *g *= ls2.exp();
        }

        let (kl, kl_d_theta, kl_d_ls2) = self.hidden.kl_divergence();
        if kl_weight > 0.0 {
            for (g, k) in d_theta.as_mut_slice().iter_mut().zip(kl_d_theta.as_slice()) {
                *g += kl_weight * k;
            }
            for (g, k) in d_ls2.as_mut_slice().iter_mut().zip(kl_d_ls2.as_slice()) {
                *g += kl_weight * k;
            }
        }
        let likelihood = scale * nll_sum;
        Ok((
            SgvbLoss {
                loss: likelihood + kl_weight * kl,
                likelihood,
                kl,
            },
            VdGradients {
                theta: d_theta,
                log_sigma2: d_ls2,
                bias: d_bias,
                head: head_grads,
            },
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropRule {
    /// Drop when `count(α ≥ threshold) / fan_in ≥ neuron_drop_fraction`.
    Fraction,
    /// Drop when `count(α ≥ threshold) > neuron_drop_fraction · fan_in`.
    CountAbove,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SparsifyConfig {
    pub alpha_keep_threshold: f64,
    pub neuron_drop_fraction: f64,
    pub drop_rule: DropRule,
    /// Share of the total steps over which the KL weight ramps 0 → 1.
    pub kl_warmup_fraction: f64,
    /// KL weight reached after warmup.
    pub max_kl_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub init_log_sigma2: f64,
    /// Keep `log σ²` fixed at its initial value.
    pub freeze_log_sigma2: bool,
}

impl Default for SparsifyConfig {
    fn default() -> Self {
        Self {
            alpha_keep_threshold: 1.0,
            neuron_drop_fraction: 0.97,
            drop_rule: DropRule::Fraction,
            kl_warmup_fraction: 0.2,
            max_kl_weight: 1.0,
            epochs: 100,
            batch_size: 64,
            learning_rate: 0.001,
            init_log_sigma2: -10.0,
            freeze_log_sigma2: false,
        }
    }
}

impl SparsifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.neuron_drop_fraction > 0.0 && self.neuron_drop_fraction <= 1.0) {
            return Err(AfmError::Config(format!(
                "neuron_drop_fraction {} outside (0, 1]",
                self.neuron_drop_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(AfmError::Config("sparsify batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.max_kl_weight) {
            return Err(AfmError::Config("max_kl_weight outside [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.kl_warmup_fraction) {
            return Err(AfmError::Config("kl_warmup_fraction outside [0, 1]".into()));
        }
        Ok(())
    }

    /// KL weight at `step` of `total_steps`.
    pub fn kl_weight(&self, step: usize, total_steps: usize) -> f64 {
        let warmup = self.kl_warmup_fraction * total_steps as f64;
        let ramp = if warmup <= 0.0 { 1.0 } else { (step as f64 / warmup).min(1.0) };
        ramp * self.max_kl_weight
    }
}

/// Per-neuron count of incoming weights with `α ≥ alpha_keep_threshold`.
pub fn droppable_counts(layer: &VariationalLayer, cfg: &SparsifyConfig) -> Vec<usize> {
    let log_thr = cfg.alpha_keep_threshold.ln();
    (0..layer.fan_out())
        .map(|j| (0..layer.fan_in()).filter(|&i| layer.log_alpha(i, j) >= log_thr).count())
        .collect()
}

/// Bit `j` is 0 when neuron `j` has enough high-α incoming weights.
pub fn extract_neuron_mask(layer: &VariationalLayer, cfg: &SparsifyConfig) -> NeuronMask {
    let fan_in = layer.fan_in() as f64;
    let bits = droppable_counts(layer, cfg)
        .into_iter()
        .map(|count| {
            let drop = match cfg.drop_rule {
                DropRule::Fraction => count as f64 / fan_in >= cfg.neuron_drop_fraction,
                DropRule::CountAbove => count as f64 > cfg.neuron_drop_fraction * fan_in,
            };
            !drop
        })
        .collect();
    NeuronMask::from_bools(bits)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsifyEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_nll: f64,
    pub kl_weight: f64,
    pub active_neurons: usize,
}

#[derive(Debug, Clone)]
pub struct SparsifyOutcome {
    pub net: VariationalNet,
    pub mask: NeuronMask,
    pub history: Vec<SparsifyEpoch>,
    /// Mean minibatch cross-entropy of every optimizer step.
    pub step_losses: Vec<f64>,
}

/// Trains a variational copy of `init` on `data` and extracts a mask.
///
/// Neurons active in `frozen_mask` are gated out during training and are
/// forced to 0 in the result, so the result is disjoint from it.
pub fn train_sparse<R: Rng + ?Sized>(
    data: &LabeledDataset,
    init: &Network,
    cfg: &SparsifyConfig,
    frozen_mask: Option<&NeuronMask>,
    shuffle_rng: &mut R,
    noise_rng: &mut R,
) -> Result<SparsifyOutcome> {
    cfg.validate()?;
    let mut net = VariationalNet::from_dense(init, cfg.init_log_sigma2)?;
    let width = net.width();
    let candidates = match frozen_mask {
        Some(f) if f.len() != width => {
            return Err(AfmError::dim(0, format!("frozen mask width {} vs layer width {width}", f.len())));
        }
        Some(f) => f.complement(),
        None => NeuronMask::ones(width),
    };
    if candidates.is_all_zero() {
        return Err(AfmError::DegenerateMask(
            "every neuron is frozen by earlier tasks; no candidates left".into(),
        ));
    }
    if data.is_empty() {
        return Err(AfmError::Input(format!("dataset `{}` is empty", data.name)));
    }
    let gate = (!candidates.is_all_ones()).then_some(&candidates);
    let mut opt = OptimizerState::adam(cfg.learning_rate);
    let frozen_tensors: Vec<bool> = {
        let mut f = vec![false; 5];
        f[1] = cfg.freeze_log_sigma2;
        f
    };
    let n = data.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let inv_n = 1.0 / n as f64;
    let mut step = 0usize;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::with_capacity(total_steps);
    for epoch in 0..cfg.epochs {
        let order = nn::batch_order(n, shuffle_rng);
        let (mut loss_sum, mut nll_sum, mut kl_w) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            kl_w = cfg.kl_weight(step, total_steps);
            let xb = data.images.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let noise = draw_noise(xb.rows(), width, noise_rng);
            let (loss, mut grads) = net.sgvb_objective(&xb, &yb, n, kl_w, &noise, gate)?;
            // optimize the bound per data point; same direction, N-free scale
            grads.theta.as_mut_slice().iter_mut().for_each(|g| *g *= inv_n);
            grads.log_sigma2.as_mut_slice().iter_mut().for_each(|g| *g *= inv_n);
            grads.bias.iter_mut().for_each(|g| *g *= inv_n);
            grads.head.scale(inv_n);
            opt.step_with_frozen(&mut net.param_slices_mut(), &grads.slices(), &frozen_tensors)?;
            let batch_ce = loss.likelihood * inv_n;
            step_losses.push(batch_ce);
            loss_sum += loss.loss * inv_n;
            nll_sum += batch_ce;
            step += 1;
        }
        if !net.param_slices().iter().all(|s| s.iter().all(|v| !v.is_nan())) {
            return Err(AfmError::Numeric(format!("variational parameters after epoch {epoch}")));
        }
        let active = extract_neuron_mask(&net.hidden, cfg).and(&candidates)?.count_active();
        history.push(SparsifyEpoch {
            epoch,
            mean_loss: loss_sum / steps_per_epoch as f64,
            mean_nll: nll_sum / steps_per_epoch as f64,
            kl_weight: kl_w,
            active_neurons: active,
        });
    }
    let mask = extract_neuron_mask(&net.hidden, cfg).and(&candidates)?;
    if mask.is_all_zero() {
        return Err(AfmError::DegenerateMask(format!(
            "all {} candidate neurons were pruned on `{}`; the drop threshold is too aggressive",
            candidates.count_active(),
            data.name
        )));
    }
    Ok(SparsifyOutcome {
        net,
        mask,
        history,
        step_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_at_alpha_one() {
        let expected = K1 / (1.0 + (-K2).exp()) - 0.5 * 2f64.ln();
        assert!((kl_term(0.0) - expected).abs() < 1e-15);
        assert!((kl_term(0.0) - 0.2045).abs() < 1e-4);
    }

    #[test]
    fn kl_saturates_at_k1() {
        assert!((kl_term(50.0) - K1).abs() < 1e-12);
        assert!(kl_term(1e6) <= K1);
    }

    #[test]
    fn kl_derivative_matches_difference_quotient() {
        for la in [-6.0, -1.0, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (kl_term(la + h) - kl_term(la - h)) / (2.0 * h);
            assert!((fd - kl_term_derivative(la)).abs() < 1e-8);
        }
    }

    fn layer_with_alphas(fan_in: usize, droppable: usize) -> VariationalLayer {
        // θ = 1, so α = σ²: 5.0 for droppable weights, 0.01 otherwise
        let theta = Matrix2D::filled(fan_in, 1, 1.0);
        let ls2 = Matrix2D::from_vec(
            fan_in,
            1,
            (0..fan_in).map(|i| if i < droppable { 5f64.ln() } else { 0.01f64.ln() }).collect(),
        )
        .unwrap();
        VariationalLayer::new(theta, ls2, vec![0.0]).unwrap()
    }

    #[test]
    fn drop_rule_at_extremes() {
        let cfg = SparsifyConfig::default();
        assert_eq!(extract_neuron_mask(&layer_with_alphas(10, 10), &cfg).to_u8(), vec![0]);
        assert_eq!(extract_neuron_mask(&layer_with_alphas(10, 9), &cfg).to_u8(), vec![1]);
        let count = SparsifyConfig {
            drop_rule: DropRule::CountAbove,
            neuron_drop_fraction: 0.5,
            ..cfg
        };
        assert_eq!(extract_neuron_mask(&layer_with_alphas(10, 5), &count).to_u8(), vec![1]);
        assert_eq!(extract_neuron_mask(&layer_with_alphas(10, 6), &count).to_u8(), vec![0]);
    }

    #[test]
    fn zero_theta_counts_as_droppable() {
        let layer = VariationalLayer::new(Matrix2D::zeros(4, 1), Matrix2D::filled(4, 1, -20.0), vec![0.0]).unwrap();
        assert_eq!(droppable_counts(&layer, &SparsifyConfig::default()), vec![4]);
    }

    #[test]
    fn zero_variance_is_deterministic() {
        let theta = Matrix2D::from_rows(&[[0.5, -1.0], [2.0, 0.25]]).unwrap();
        let layer = VariationalLayer::new(theta.clone(), Matrix2D::filled(2, 2, ZERO_VARIANCE_LOG_SIGMA2), vec![0.1, -0.2])
            .unwrap();
        let x = Matrix2D::from_rows(&[[1.0, 3.0], [0.0, 0.0]]).unwrap();
        let mut r = crate::rng::stream(0, 0);
        let out = vd_forward_train(&layer, &x, &mut r).unwrap();
        let mut expected = x.matmul(&theta).unwrap();
        expected.add_row_vector(&[0.1, -0.2]);
        assert_eq!(out.pre, expected);
        // zero input row yields the bias whatever the noise
        let noisy = VariationalLayer::new(theta, Matrix2D::filled(2, 2, 1.0), vec![0.1, -0.2]).unwrap();
        let out = vd_forward_train(&noisy, &x, &mut r).unwrap();
        assert_eq!(out.pre.row(1), &[0.1, -0.2]);
    }

    #[test]
    fn non_finite_parameters_rejected() {
        let mut layer = layer_with_alphas(3, 1);
        layer.theta.set(0, 0, f64::NAN);
        let mut r = crate::rng::stream(0, 0);
        let err = vd_forward_train(&layer, &Matrix2D::zeros(1, 3), &mut r).unwrap_err();
        assert!(matches!(err, AfmError::Numeric(_)));
    }
}
