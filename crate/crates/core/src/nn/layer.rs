use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{AfmError, Result};
use crate::mask::NeuronMask;
use crate::matrix::Matrix2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    ReLU,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::ReLU => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Identity => z,
        }
    }

    /// Derivative evaluated at the pre-activation `z` (ReLU'(0) = 0).
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::ReLU => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Affine layer plus activation whose output neurons can be gated by a
/// [`NeuronMask`]. Weights are stored `fan_in × fan_out` so a batch forward
/// is `x · W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingLayer {
    pub weights: Matrix2D,
    pub bias: Vec<f64>,
    pub activation: Activation,
    mask_slot: Option<NeuronMask>,
}

impl ForgettingLayer {
    pub fn new(weights: Matrix2D, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.cols() {
            return Err(AfmError::Shape(format!(
                "bias length {} does not match fan_out {}",
                bias.len(),
                weights.cols()
            )));
        }
        Ok(Self {
            weights,
            bias,
            activation,
            mask_slot: None,
        })
    }

    /// Glorot-uniform weights in ±√(6/(fan_in+fan_out)), zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite init bound");
        let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        Self {
            weights: Matrix2D::from_vec(fan_in, fan_out, data).expect("init shape"),
            bias: vec![0.0; fan_out],
            activation,
            mask_slot: None,
        }
    }

    #[inline]
    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    #[inline]
    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }

    pub fn mask_slot(&self) -> Option<&NeuronMask> {
        self.mask_slot.as_ref()
    }

    pub fn set_mask_slot(&mut self, mask: Option<NeuronMask>) -> Result<()> {
        if let Some(m) = &mask {
            if m.len() != self.fan_out() {
                return Err(AfmError::Shape(format!(
                    "mask width {} does not match layer fan_out {}",
                    m.len(),
                    self.fan_out()
                )));
            }
        }
        self.mask_slot = mask;
        Ok(())
    }
}
