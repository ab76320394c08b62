//! Reinforcement-learning side: symbol-sequence environments, replay,
//! mask-conditioned Q-learning, decision-process statistics and the
//! multi-phase training pipeline.

pub mod dqn;
pub mod env;
pub mod fdp;
pub mod pipeline;
pub mod replay;

pub use env::{AgentState, AlgorithmicEnv, Alphabet, EnvKind};
pub use pipeline::{run_afm_rl, RlConfig, RlOutcome, RlReport};
pub use replay::{MaskId, ReplayBuffer, ReplayTransition};
