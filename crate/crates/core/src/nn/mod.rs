//! Dense network engine: forgetting layers, losses, optimizers and the
//! minibatch loop shared by every trainer in the crate.

mod layer;
mod loss;
mod network;
mod optim;
mod train;

pub use layer::{Activation, ForgettingLayer};
pub use loss::{bce_with_logits, sigmoid, softmax_cross_entropy, softmax_nll_sum};
pub use network::{ForwardCache, Gradients, LayerGrad, LayerMasks, Network};
pub use optim::{OptimizerKind, OptimizerState};
pub use train::{accuracy, batch_order, train_classifier_epoch, FrozenTensors};
