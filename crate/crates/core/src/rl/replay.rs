//! FIFO experience replay with uniform sampling.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{AfmError, Result};
use crate::mask::TaskId;
use crate::rl::env::AgentState;

/// Identifier of a stored mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MaskId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayTransition {
    pub task: TaskId,
    pub mask: MaskId,
    pub state: AgentState,
    pub action: usize,
    pub reward: f64,
    /// Ignored by the learning target when `terminal` is set.
    pub next_state: AgentState,
    pub terminal: bool,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<ReplayTransition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(AfmError::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            items: VecDeque::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends, evicting the oldest transition at capacity.
    pub fn push(&mut self, t: ReplayTransition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn get(&self, i: usize) -> Option<&ReplayTransition> {
        self.items.get(i)
    }

    /// Indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(AfmError::State("sampling from an empty replay buffer".into()));
        }
        Ok((0..batch).map(|_| rng.random_range(0..self.items.len())).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<ReplayTransition>> {
        Ok(self
            .sample_indices(batch, rng)?
            .into_iter()
            .map(|i| self.items[i])
            .collect())
    }
}
