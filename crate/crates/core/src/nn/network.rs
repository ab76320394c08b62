//! Stack of forgetting layers with explicit forward and backward passes.
//!
//! Masks gate post-activation outputs. A gated neuron's output is written as
//! exactly `0.0`, and its pre-activation gradient is exactly `0.0`, so every
//! weight entering or leaving it receives an exactly-zero gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layer::{Activation, ForgettingLayer};
use crate::error::{AfmError, Result};
use crate::mask::NeuronMask;
use crate::matrix::Matrix2D;

/// Per-layer masks. An empty slice means "no gating anywhere"; otherwise the
/// slice has one entry per layer and `None` leaves that layer ungated.
pub type LayerMasks<'a> = [Option<&'a NeuronMask>];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<ForgettingLayer>,
}

/// Everything backward needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Matrix2D,
    pub pre: Vec<Matrix2D>,
    pub post: Vec<Matrix2D>,
    gates: Vec<Option<Vec<bool>>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix2D {
        self.post.last().expect("network has at least one layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix2D,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: Matrix2D::zeros(l.fan_in(), l.fan_out()),
                    bias: vec![0.0; l.fan_out()],
                })
                .collect(),
        }
    }

    /// Flat views in the same order as [`Network::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|g| [g.weights.as_slice(), g.bias.as_slice()])
            .collect()
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.layers {
            g.weights.as_mut_slice().iter_mut().for_each(|v| *v *= s);
            g.bias.iter_mut().for_each(|v| *v *= s);
        }
    }
}

impl Network {
    pub fn new(layers: Vec<ForgettingLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(AfmError::Config("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(AfmError::dim(
                    i + 1,
                    format!("fan_in {} does not match previous fan_out {}", pair[1].fan_in(), pair[0].fan_out()),
                ));
            }
        }
        Ok(Self { layers })
    }

    /// Dense net over `widths` (input first): ReLU hidden layers, Identity output.
    pub fn mlp<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 {
            return Err(AfmError::Config(format!("need at least two widths, got {widths:?}")));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { Activation::Identity } else { Activation::ReLU };
                ForgettingLayer::init(widths[i], widths[i + 1], act, rng)
            })
            .collect();
        Self::new(layers)
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(|l| l.fan_out()).unwrap_or(0)
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(self.layers.iter().map(|l| l.fan_out()));
        w
    }

    fn resolve_gates(&self, masks: &LayerMasks<'_>) -> Result<Vec<Option<Vec<bool>>>> {
        if !masks.is_empty() && masks.len() != self.layers.len() {
            return Err(AfmError::dim(
                0,
                format!("{} masks supplied for {} layers", masks.len(), self.layers.len()),
            ));
        }
        self.layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                let m = masks.get(i).copied().flatten().or(layer.mask_slot());
                match m {
                    None => Ok(None),
                    Some(m) if m.len() != layer.fan_out() => Err(AfmError::dim(
                        i,
                        format!("mask width {} does not match fan_out {}", m.len(), layer.fan_out()),
                    )),
                    Some(m) if m.is_all_ones() => Ok(None),
                    Some(m) => Ok(Some(m.bits().to_vec())),
                }
            })
            .collect()
    }

    /// Masked forward pass. Layers without an explicit mask fall back to their
    /// mask slot, then to all-ones.
    pub fn forward(&self, x: &Matrix2D, masks: &LayerMasks<'_>) -> Result<ForwardCache> {
        if x.cols() != self.input_width() {
            return Err(AfmError::dim(
                0,
                format!("input has {} columns, layer expects {}", x.cols(), self.input_width()),
            ));
        }
        let gates = self.resolve_gates(masks)?;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Matrix2D> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 { x } else { &post[i - 1] };
            let mut z = input.matmul(&layer.weights)?;
            z.add_row_vector(&layer.bias);
            let mut a = z.map(|v| layer.activation.apply(v));
            if let Some(gate) = &gates[i] {
                for r in 0..a.rows() {
                    for (v, &on) in a.row_mut(r).iter_mut().zip(gate) {
                        if !on {
                            *v = 0.0;
                        }
                    }
                }
            }
            pre.push(z);
            post.push(a);
        }
        Ok(ForwardCache {
            input: x.clone(),
            pre,
            post,
            gates,
        })
    }

    /// Forward returning only the output.
    pub fn predict(&self, x: &Matrix2D, masks: &LayerMasks<'_>) -> Result<Matrix2D> {
        let mut cache = self.forward(x, masks)?;
        Ok(cache.post.pop().expect("non-empty"))
    }

    /// Gradients of a scalar loss with respect to all weights and biases,
    /// given `d loss / d output`.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &Matrix2D) -> Result<Gradients> {
        self.backward_full(cache, grad_output, false).map(|(g, _)| g)
    }

    /// Like [`Network::backward`] but also returns `d loss / d input`.
    pub fn backward_with_input_grad(
        &self,
        cache: &ForwardCache,
        grad_output: &Matrix2D,
    ) -> Result<(Gradients, Matrix2D)> {
        let (g, dx) = self.backward_full(cache, grad_output, true)?;
        Ok((g, dx.expect("requested")))
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<()> {
        let n = self.layers.len();
        if cache.pre.len() != n || cache.post.len() != n || cache.gates.len() != n {
            return Err(AfmError::State(format!(
                "forward cache holds {} layers, network has {n}",
                cache.pre.len()
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if cache.pre[i].cols() != layer.fan_out() || cache.pre[i].rows() != cache.input.rows() {
                return Err(AfmError::State(format!("forward cache for layer {i} does not match this network")));
            }
        }
        Ok(())
    }

    fn backward_full(
        &self,
        cache: &ForwardCache,
        grad_output: &Matrix2D,
        want_input_grad: bool,
    ) -> Result<(Gradients, Option<Matrix2D>)> {
        self.check_cache(cache)?;
        let n = self.layers.len();
        if grad_output.shape() != cache.output().shape() {
            return Err(AfmError::dim(
                n - 1,
                format!(
                    "output gradient {:?} does not match output {:?}",
                    grad_output.shape(),
                    cache.output().shape()
                ),
            ));
        }
        let mut grads: Vec<LayerGrad> = Vec::with_capacity(n);
        let mut upstream = grad_output.clone();
        let mut input_grad = None;
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let z = &cache.pre[i];
            let mut dz = Matrix2D::zeros(z.rows(), z.cols());
            for r in 0..z.rows() {
                let zr = z.row(r);
                let ur = upstream.row(r);
                let dr = dz.row_mut(r);
                for j in 0..zr.len() {
                    dr[j] = ur[j] * layer.activation.derivative(zr[j]);
                }
                if let Some(gate) = &cache.gates[i] {
                    for (d, &on) in dr.iter_mut().zip(gate) {
                        if !on {
                            *d = 0.0;
                        }
                    }
                }
            }
            let input = if i == 0 { &cache.input } else { &cache.post[i - 1] };
            let dw = input.t_matmul(&dz)?;
            let db = dz.col_sums();
            if i > 0 || want_input_grad {
                let dx = dz.matmul_t(&layer.weights)?;
                if i == 0 {
                    input_grad = Some(dx);
                } else {
                    upstream = dx;
                }
            }
            grads.push(LayerGrad { weights: dw, bias: db });
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, input_grad))
    }

    /// Flat mutable views: `[w0, b0, w1, b1, ...]`.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Equivalent network with gated neurons physically removed: columns of
    /// the masked layer and the matching rows of the next layer are deleted.
    pub fn pruned(&self, masks: &LayerMasks<'_>) -> Result<Network> {
        let gates = self.resolve_gates(masks)?;
        let mut layers = self.layers.clone();
        for (i, gate) in gates.iter().enumerate() {
            let Some(gate) = gate else { continue };
            let keep: Vec<usize> = (0..gate.len()).filter(|&j| gate[j]).collect();
            let l = &mut layers[i];
            l.weights = l.weights.select_cols(&keep);
            l.bias = keep.iter().map(|&j| l.bias[j]).collect();
            l.set_mask_slot(None)?;
            if i + 1 < layers.len() {
                let next = &mut layers[i + 1];
                next.weights = next.weights.select_rows(&keep);
            }
        }
        Network::new(layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn identity_net() -> Network {
        let layer = ForgettingLayer::new(Matrix2D::identity(2), vec![0.0, 0.0], Activation::Identity).unwrap();
        Network::new(vec![layer]).unwrap()
    }

    #[test]
    fn identity_forward() {
        let net = identity_net();
        let x = Matrix2D::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(net.predict(&x, &[]).unwrap(), x);
        let mask = NeuronMask::from_bits(&[1, 0]).unwrap();
        let y = net.predict(&x, &[Some(&mask)]).unwrap();
        assert_eq!(y.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn mask_slot_is_default_gate() {
        let mut net = identity_net();
        net.layers[0].set_mask_slot(Some(NeuronMask::from_bits(&[0, 1]).unwrap())).unwrap();
        let x = Matrix2D::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(net.predict(&x, &[]).unwrap().as_slice(), &[0.0, 2.0]);
        assert!(net.layers[0].set_mask_slot(Some(NeuronMask::ones(3))).is_err());
    }

    #[test]
    fn dimension_errors_name_layer() {
        let mut r = rng::stream(0, 0);
        let net = Network::mlp(&[3, 4, 2], &mut r).unwrap();
        let err = net.forward(&Matrix2D::zeros(1, 5), &[]).unwrap_err();
        assert!(matches!(err, AfmError::Dimension { layer: 0, .. }));
        let bad = NeuronMask::ones(3);
        let err = net.forward(&Matrix2D::zeros(1, 3), &[Some(&bad), None]).unwrap_err();
        assert!(matches!(err, AfmError::Dimension { layer: 0, .. }));
        let bad = NeuronMask::ones(4);
        let err = net.forward(&Matrix2D::zeros(1, 3), &[None, Some(&bad)]).unwrap_err();
        assert!(matches!(err, AfmError::Dimension { layer: 1, .. }));
    }

    #[test]
    fn foreign_cache_is_state_error() {
        let mut r = rng::stream(0, 0);
        let a = Network::mlp(&[3, 4, 2], &mut r).unwrap();
        let b = Network::mlp(&[3, 5, 2], &mut r).unwrap();
        let cache = a.forward(&Matrix2D::zeros(2, 3), &[]).unwrap();
        let err = b.backward(&cache, &Matrix2D::zeros(2, 2)).unwrap_err();
        assert!(matches!(err, AfmError::State(_)));
    }

    #[test]
    fn fully_masked_hidden_layer_has_zero_grads() {
        let mut r = rng::stream(1, 0);
        let net = Network::mlp(&[4, 6, 3], &mut r).unwrap();
        let x = Matrix2D::from_rows(&[[0.3, -1.0, 2.0, 0.5], [1.0, 1.0, -0.2, 0.0]]).unwrap();
        let mask = NeuronMask::zeros(6);
        let cache = net.forward(&x, &[Some(&mask), None]).unwrap();
        let g = net.backward(&cache, &Matrix2D::filled(2, 3, 0.7)).unwrap();
        assert!(g.layers[0].weights.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.layers[0].bias.iter().all(|&v| v == 0.0));
        assert!(g.layers[1].weights.as_slice().iter().all(|&v| v == 0.0));
        // output bias still learns
        assert!(g.layers[1].bias.iter().all(|&v| v != 0.0));
    }
}
