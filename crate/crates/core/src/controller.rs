//! Associative controller: a dense network that reads a raw sample and
//! emits the neuron mask of the task the sample belongs to.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AfmError, Result};
use crate::mask::{NeuronMask, TaskId};
use crate::matrix::Matrix2D;
use crate::nn::{self, bce_with_logits, sigmoid, Network, OptimizerState};

/// Mask table keyed by task.
pub type MaskTable = BTreeMap<TaskId, NeuronMask>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmitMode {
    /// One mask per sample.
    PerSample,
    /// One mask per batch: bit `j` is on when at least half the samples
    /// switch it on.
    MajorityVote,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerNet {
    /// ReLU hidden layers, identity output; outputs are logits.
    pub net: Network,
    /// Bit `j` is on iff `sigmoid(logit_j) ≥ emit_threshold`.
    pub emit_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    /// Hidden widths between the sample and the mask.
    pub hidden: Vec<usize>,
    pub emit_threshold: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub emit_mode: EmitMode,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            hidden: vec![512],
            emit_threshold: 0.5,
            epochs: 100,
            batch_size: 64,
            learning_rate: 0.001,
            emit_mode: EmitMode::PerSample,
        }
    }
}

impl ControllerNet {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: &[usize], mask_width: usize, emit_threshold: f64, rng: &mut R) -> Result<Self> {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(mask_width);
        Ok(Self {
            net: Network::mlp(&widths, rng)?,
            emit_threshold,
        })
    }

    pub fn from_config<R: Rng + ?Sized>(input: usize, mask_width: usize, cfg: &ControllerConfig, rng: &mut R) -> Result<Self> {
        Self::new(input, &cfg.hidden, mask_width, cfg.emit_threshold, rng)
    }

    pub fn mask_width(&self) -> usize {
        self.net.output_width()
    }

    fn bits_from_logits(&self, logits: &[f64]) -> NeuronMask {
        NeuronMask::from_bools(logits.iter().map(|&z| sigmoid(z) >= self.emit_threshold).collect())
    }

    /// Mask for one sample.
    pub fn emit_mask(&self, sample: &[f64]) -> Result<NeuronMask> {
        let x = Matrix2D::from_vec(1, sample.len(), sample.to_vec())?;
        let logits = self.net.predict(&x, &[])?;
        Ok(self.bits_from_logits(logits.row(0)))
    }

    /// One mask per row.
    pub fn emit_masks(&self, x: &Matrix2D) -> Result<Vec<NeuronMask>> {
        let logits = self.net.predict(x, &[])?;
        Ok((0..logits.rows()).map(|r| self.bits_from_logits(logits.row(r))).collect())
    }

    /// Bitwise majority over the per-row masks; ties switch the bit on.
    pub fn emit_majority(&self, x: &Matrix2D) -> Result<NeuronMask> {
        let masks = self.emit_masks(x)?;
        let width = self.mask_width();
        let bits = (0..width)
            .map(|j| 2 * masks.iter().filter(|m| m.get(j)).count() >= masks.len())
            .collect();
        Ok(NeuronMask::from_bools(bits))
    }

    /// Share of rows whose emitted mask equals their task's mask exactly.
    pub fn exact_match_rate(&self, x: &Matrix2D, tasks: &[TaskId], table: &MaskTable) -> Result<f64> {
        let targets = target_rows(tasks, table, self.mask_width())?;
        let emitted = self.emit_masks(x)?;
        if emitted.is_empty() {
            return Ok(0.0);
        }
        let hits = emitted
            .iter()
            .enumerate()
            .filter(|(r, m)| m.bits().iter().zip(targets.row(*r)).all(|(&b, &t)| b == (t == 1.0)))
            .count();
        Ok(hits as f64 / emitted.len() as f64)
    }
}

/// Target matrix with one mask row per sample.
fn target_rows(tasks: &[TaskId], table: &MaskTable, width: usize) -> Result<Matrix2D> {
    let mut out = Matrix2D::zeros(tasks.len(), width);
    for (r, task) in tasks.iter().enumerate() {
        let mask = table
            .get(task)
            .ok_or_else(|| AfmError::Config(format!("no mask stored for {task}")))?;
        if mask.len() != width {
            return Err(AfmError::dim(
                0,
                format!("mask for {task} has width {}, controller emits {width}", mask.len()),
            ));
        }
        out.row_mut(r).copy_from_slice(&mask.as_gate());
    }
    Ok(out)
}

/// Trains `controller` to emit `table[task]` for every sample of `task`
/// with per-bit binary cross-entropy. Returns the mean loss of each epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_controller<R: Rng + ?Sized>(
    controller: &mut ControllerNet,
    opt: &mut OptimizerState,
    x: &Matrix2D,
    tasks: &[TaskId],
    table: &MaskTable,
    epochs: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if x.rows() != tasks.len() {
        return Err(AfmError::Consistency(format!("{} samples vs {} task labels", x.rows(), tasks.len())));
    }
    if batch_size == 0 {
        return Err(AfmError::Config("controller batch size must be positive".into()));
    }
    let targets = target_rows(tasks, table, controller.mask_width())?;
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let order = nn::batch_order(x.rows(), rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let xb = x.select_rows(chunk);
            let tb = targets.select_rows(chunk);
            let cache = controller.net.forward(&xb, &[])?;
            let (loss, grad) = bce_with_logits(cache.output(), &tb)?;
            let grads = controller.net.backward(&cache, &grad)?;
            opt.step(&mut controller.net.param_slices_mut(), &grads.slices())?;
            total += loss;
            batches += 1;
        }
        if !controller.net.is_finite() {
            return Err(AfmError::Numeric("controller parameters".into()));
        }
        history.push(total / batches.max(1) as f64);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, ForgettingLayer};
    use crate::rng;

    fn fixed_logits(bias: Vec<f64>) -> ControllerNet {
        let layer = ForgettingLayer::new(Matrix2D::zeros(2, bias.len()), bias, Activation::Identity).unwrap();
        ControllerNet {
            net: Network::new(vec![layer]).unwrap(),
            emit_threshold: 0.5,
        }
    }

    #[test]
    fn half_probability_switches_bit_on() {
        let c = fixed_logits(vec![0.0, 0.0, 0.0]);
        assert!(c.emit_mask(&[0.3, -0.2]).unwrap().is_all_ones());
    }

    #[test]
    fn saturated_logits_give_sign_pattern() {
        let c = fixed_logits(vec![50.0, -50.0, 50.0, -50.0]);
        assert_eq!(c.emit_mask(&[1.0, 1.0]).unwrap().to_u8(), vec![1, 0, 1, 0]);
        let x = Matrix2D::zeros(3, 2);
        assert_eq!(c.emit_majority(&x).unwrap().to_u8(), vec![1, 0, 1, 0]);
    }

    #[test]
    fn uniform_output_bce_is_ln2() {
        let logits = Matrix2D::zeros(4, 3);
        let targets = Matrix2D::from_rows(&[[1.0, 0.0, 1.0], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 0.0]]).unwrap();
        let (loss, _) = bce_with_logits(&logits, &targets).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn missing_task_mask_is_config_error() {
        let mut c = ControllerNet::new(2, &[4], 3, 0.5, &mut rng::stream(0, 0)).unwrap();
        let table: MaskTable = [(TaskId(0), NeuronMask::ones(3))].into();
        let err = train_controller(
            &mut c,
            &mut OptimizerState::adam(0.001),
            &Matrix2D::zeros(2, 2),
            &[TaskId(0), TaskId(1)],
            &table,
            1,
            2,
            &mut rng::stream(0, 1),
        )
        .unwrap_err();
        assert!(matches!(err, AfmError::Config(_)));
    }

    #[test]
    fn constant_target_is_learned() {
        let mask = NeuronMask::from_bits(&[1, 0, 0, 1, 1]).unwrap();
        let table: MaskTable = [(TaskId(0), mask.clone())].into();
        let mut r = rng::stream(1, 0);
        let x = Matrix2D::from_vec(40, 3, (0..120).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let tasks = vec![TaskId(0); 40];
        let mut c = ControllerNet::new(3, &[8], 5, 0.5, &mut r).unwrap();
        train_controller(&mut c, &mut OptimizerState::adam(0.01), &x, &tasks, &table, 20, 8, &mut r).unwrap();
        assert_eq!(c.exact_match_rate(&x, &tasks, &table).unwrap(), 1.0);
        assert_eq!(c.emit_mask(x.row(0)).unwrap(), mask);
    }
}
