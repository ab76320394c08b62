use serde::{Deserialize, Serialize};

use crate::error::{AfmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
    /// Moving average of squared gradients; `eps` is added outside the root.
    RmsProp { alpha: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn rmsprop(alpha: f64, eps: f64) -> Self {
        OptimizerKind::RmsProp { alpha, eps }
    }
}

/// Optimizer hyperparameters plus per-tensor moment buffers. Buffers are
/// created on the first step and keep the shape of the tensor they track.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::adam(), learning_rate)
    }

    /// Drops all moment history.
    pub fn reset(&mut self) {
        self.step_count = 0;
        self.first_moment.clear();
        self.second_moment.clear();
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        self.step_with_frozen(params, grads, &[])
    }

    /// One update. Tensors flagged in `frozen` (same indexing as `params`)
    /// are left untouched, moments included.
    pub fn step_with_frozen(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], frozen: &[bool]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(AfmError::Shape(format!(
                "{} parameter tensors but {} gradient tensors",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(AfmError::Shape(format!(
                    "tensor {i}: {} parameters vs {} gradients",
                    p.len(),
                    g.len()
                )));
            }
        }
        let needs_moments = !matches!(self.kind, OptimizerKind::Sgd);
        if needs_moments {
            if self.first_moment.is_empty() {
                self.first_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
                self.second_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
            } else if self.first_moment.len() != params.len()
                || self.first_moment.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
            {
                return Err(AfmError::Shape("moment buffers do not match parameter shapes".into()));
            }
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let lr = self.learning_rate;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if frozen.get(i).copied().unwrap_or(false) {
                continue;
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (pv, &gv) in p.iter_mut().zip(g.iter()) {
                        *pv -= lr * gv;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let bc1 = 1.0 - beta1.powf(t);
                    let bc2 = 1.0 - beta2.powf(t);
                    let m = &mut self.first_moment[i];
                    let v = &mut self.second_moment[i];
                    for k in 0..p.len() {
                        let gv = g[k];
                        m[k] = beta1 * m[k] + (1.0 - beta1) * gv;
                        v[k] = beta2 * v[k] + (1.0 - beta2) * gv * gv;
                        let m_hat = m[k] / bc1;
                        let v_hat = v[k] / bc2;
                        p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
                OptimizerKind::RmsProp { alpha, eps } => {
                    let v = &mut self.second_moment[i];
                    for k in 0..p.len() {
                        let gv = g[k];
                        v[k] = alpha * v[k] + (1.0 - alpha) * gv * gv;
                        p[k] -= lr * gv / (v[k].sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step(state: &mut OptimizerState, p: f64, g: f64) -> f64 {
        let mut pv = [p];
        state.step(&mut [&mut pv[..]], &[&[g][..]]).unwrap();
        pv[0]
    }

    #[test]
    fn sgd_exact() {
        let mut s = OptimizerState::sgd(0.1);
        assert_eq!(one_step(&mut s, 1.0, 0.5), 0.95);
        assert_eq!(one_step(&mut s, 0.95, 0.0), 0.95);
    }

    #[test]
    fn adam_first_step_is_lr() {
        // m̂ = g, v̂ = g², so Δp = -lr·g/(|g|+ε)
        let mut s = OptimizerState::adam(0.001);
        let p = one_step(&mut s, 0.0, 1.0);
        let expected = -0.001 * 1.0 / (1.0 + 1e-8);
        assert!((p - expected).abs() < 1e-15, "{p}");
    }

    #[test]
    fn rmsprop_matches_scalar_recurrence() {
        let (lr, alpha, eps, g) = (0.00025, 0.95, 0.01, 0.3);
        let mut s = OptimizerState::new(OptimizerKind::rmsprop(alpha, eps), lr);
        let mut p = 1.0;
        let (mut p_ref, mut v_ref) = (1.0f64, 0.0f64);
        for _ in 0..1000 {
            p = one_step(&mut s, p, g);
            v_ref = alpha * v_ref + (1.0 - alpha) * g * g;
            p_ref -= lr * g / (v_ref.sqrt() + eps);
        }
        assert!((p - p_ref).abs() < 1e-15);
        // v → g², so the step size settles at lr·g/(|g|+eps)
        let before = p;
        p = one_step(&mut s, p, g);
        let settled = lr * g / (g.abs() + eps);
        assert!(((before - p) - settled).abs() < 1e-12);
    }

    #[test]
    fn frozen_tensors_untouched_and_shape_checks() {
        let mut s = OptimizerState::adam(0.1);
        let mut a = [1.0, 2.0];
        let mut b = [3.0];
        s.step_with_frozen(&mut [&mut a[..], &mut b[..]], &[&[1.0, 1.0][..], &[1.0][..]], &[false, true])
            .unwrap();
        assert_eq!(b, [3.0]);
        assert_ne!(a, [1.0, 2.0]);
        let err = s.step(&mut [&mut a[..]], &[&[1.0][..]]).unwrap_err();
        assert!(matches!(err, AfmError::Shape(_)));
    }
}
