//! Active forgetting machine: a masked dense-network engine in which every
//! task owns a binary mask over a hidden "forgetting" layer.
//!
//! - [`nn`]: forward/backward passes with neuron gating, losses, optimizers.
//! - [`sparsify`]: sparse variational dropout and neuron-mask extraction.
//! - [`evo`]: evolutionary search over binary masks.
//! - [`controller`]: the network that maps a raw sample to its task's mask.
//! - [`supervised`]: the two-task MNIST / Fashion-MNIST procedure.
//! - [`rl`]: algorithmic environments and mask-conditioned deep Q-learning.
//! - [`data`], [`checkpoint`], [`metrics`]: I/O.

pub mod checkpoint;
pub mod controller;
pub mod data;
pub mod error;
pub mod evo;
pub mod mask;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod rl;
pub mod rng;
pub mod sparsify;
pub mod supervised;

pub use error::{AfmError, Result};
pub use mask::{NeuronMask, TaskId};
pub use matrix::Matrix2D;
