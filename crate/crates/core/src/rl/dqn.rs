//! Mask-conditioned deep Q-learning.
//!
//! `Q(m, f, s, ·)` is the forgetting network evaluated on state `s` with
//! mask `f` gating its hidden layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AfmError, Result};
use crate::mask::NeuronMask;
use crate::matrix::{argmax, Matrix2D};
use crate::nn::{FrozenTensors, Network, OptimizerState};
use crate::rl::env::AgentState;
use crate::rl::replay::{ReplayBuffer, ReplayTransition};

/// Stacks encoded states into rows.
pub fn encode_states(states: &[AgentState], capacity: usize) -> Matrix2D {
    let width = 2 * capacity + 1;
    let mut m = Matrix2D::zeros(states.len(), width);
    for (r, s) in states.iter().enumerate() {
        s.write_encoding(capacity, m.row_mut(r));
    }
    m
}

/// Action values of each state under `mask`.
pub fn q_forward(net: &Network, mask: &NeuronMask, states: &Matrix2D) -> Result<Matrix2D> {
    net.predict(states, &[Some(mask), None])
}

/// Random action with probability `epsilon`, otherwise the greedy one
/// (lowest index among ties).
pub fn epsilon_greedy<R: Rng + ?Sized>(q: &[f64], epsilon: f64, rng: &mut R) -> usize {
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        rng.random_range(0..q.len())
    } else {
        argmax(q)
    }
}

/// Linear decay from `start` to `end` over the first `fraction` of a
/// budget, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub fraction: f64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 0.05,
            fraction: 0.1,
        }
    }
}

impl EpsilonSchedule {
    pub fn value(&self, step: usize, budget: usize) -> f64 {
        let span = self.fraction * budget as f64;
        if span <= 0.0 {
            return self.end;
        }
        if step as f64 >= span.round() {
            return self.end;
        }
        let t = step as f64 / span;
        self.start + t * (self.end - self.start)
    }
}

/// `r` for terminal transitions, else `r + γ·max_a' Q⁻(s', a')`.
pub fn dqn_targets(target: &Network, batch: &[ReplayTransition], gamma: f64, mask: &NeuronMask, capacity: usize) -> Result<Vec<f64>> {
    let next: Vec<AgentState> = batch.iter().map(|t| t.next_state).collect();
    let q_next = q_forward(target, mask, &encode_states(&next, capacity))?;
    Ok(batch
        .iter()
        .enumerate()
        .map(|(r, t)| {
            if t.terminal {
                t.reward
            } else {
                let best = q_next.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max);
                t.reward + gamma * best
            }
        })
        .collect())
}

/// Mean squared TD error of `batch` and its gradients, with the targets
/// held fixed.
pub fn dqn_loss_and_grads(
    online: &Network,
    target: &Network,
    batch: &[ReplayTransition],
    gamma: f64,
    mask: &NeuronMask,
    capacity: usize,
) -> Result<(f64, crate::nn::Gradients)> {
    if batch.is_empty() {
        return Err(AfmError::State("empty training batch".into()));
    }
    if let Some(t) = batch.iter().find(|t| t.mask != batch[0].mask) {
        return Err(AfmError::Consistency(format!(
            "batch mixes masks {:?} and {:?}",
            batch[0].mask, t.mask
        )));
    }
    let y = dqn_targets(target, batch, gamma, mask, capacity)?;
    let states: Vec<AgentState> = batch.iter().map(|t| t.state).collect();
    let cache = online.forward(&encode_states(&states, capacity), &[Some(mask), None])?;
    let q = cache.output();
    let n = batch.len() as f64;
    let mut grad = Matrix2D::zeros(q.rows(), q.cols());
    let mut loss = 0.0;
    for (r, t) in batch.iter().enumerate() {
        if t.action >= q.cols() {
            return Err(AfmError::Input(format!("stored action {} outside [0, {})", t.action, q.cols())));
        }
        let diff = q.get(r, t.action) - y[r];
        loss += diff * diff;
        grad.set(r, t.action, 2.0 * diff / n);
    }
    let grads = online.backward(&cache, &grad)?;
    Ok((loss / n, grads))
}

/// One optimizer step on `batch`; returns the loss before the step.
#[allow(clippy::too_many_arguments)]
pub fn dqn_train_step(
    online: &mut Network,
    target: &Network,
    batch: &[ReplayTransition],
    gamma: f64,
    mask: &NeuronMask,
    capacity: usize,
    opt: &mut OptimizerState,
    frozen: &FrozenTensors,
) -> Result<f64> {
    let (loss, grads) = dqn_loss_and_grads(online, target, batch, gamma, mask, capacity)?;
    opt.step_with_frozen(&mut online.param_slices_mut(), &grads.slices(), frozen.as_slice())?;
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QLearnerConfig {
    pub gamma: f64,
    pub batch_size: usize,
    /// Transitions collected before the first update.
    pub learn_start: usize,
    /// Steps between target-network copies.
    pub sync_interval: usize,
    pub replay_capacity: usize,
    /// One-hot slots per symbol field of the state.
    pub symbol_capacity: usize,
}

/// Replay buffer and target network of one training phase. The online
/// network and optimizer are passed in so they can outlive the phase.
#[derive(Debug, Clone)]
pub struct QLearner {
    cfg: QLearnerConfig,
    target: Network,
    replay: ReplayBuffer,
    steps: usize,
}

impl QLearner {
    pub fn new(online: &Network, cfg: QLearnerConfig) -> Result<Self> {
        if cfg.batch_size == 0 || cfg.sync_interval == 0 {
            return Err(AfmError::Config("batch size and sync interval must be positive".into()));
        }
        Ok(Self {
            cfg,
            target: online.clone(),
            replay: ReplayBuffer::new(cfg.replay_capacity)?,
            steps: 0,
        })
    }

    pub fn target(&self) -> &Network {
        &self.target
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.replay
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Stores `t`, takes one update once enough transitions are stored and
    /// copies the online network into the target every `sync_interval`
    /// steps. Returns the loss when an update happened.
    #[allow(clippy::too_many_arguments)]
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        online: &mut Network,
        opt: &mut OptimizerState,
        t: ReplayTransition,
        mask: &NeuronMask,
        frozen: &FrozenTensors,
        rng: &mut R,
    ) -> Result<Option<f64>> {
        self.replay.push(t);
        self.steps += 1;
        let mut loss = None;
        if self.replay.len() >= self.cfg.learn_start.max(self.cfg.batch_size) {
            let batch = self.replay.sample(self.cfg.batch_size, rng)?;
            loss = Some(dqn_train_step(
                online,
                &self.target,
                &batch,
                self.cfg.gamma,
                mask,
                self.cfg.symbol_capacity,
                opt,
                frozen,
            )?);
        }
        if self.steps.is_multiple_of(self.cfg.sync_interval) {
            self.target = online.clone();
        }
        Ok(loss)
    }
}
