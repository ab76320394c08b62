//! End-to-end copy / duplicate-dropping training with masks.
//!
//! Phases:
//! 1. learn the copy task with every neuron active, up to its threshold;
//! 2. search a copy mask by genetic search on greedy episode reward;
//! 3. train the controller to map copy states to the copy mask and
//!    duplicate-dropping states to its complement;
//! 4. retrain the copy task under its mask;
//! 5. learn the duplicate-dropping task under the complement mask, with the
//!    copy neurons gated out and therefore untouched.

use serde::{Deserialize, Serialize};

use crate::controller::{train_controller, ControllerConfig, ControllerNet, MaskTable};
use crate::error::{AfmError, Result};
use crate::evo::{evolve, EvoConfig};
use crate::mask::{NeuronMask, TaskId};
use crate::matrix::argmax;
use crate::metrics::MetricsLog;
use crate::nn::{FrozenTensors, Network, OptimizerKind, OptimizerState};
use crate::rl::dqn::{encode_states, epsilon_greedy, q_forward, EpsilonSchedule, QLearner, QLearnerConfig};
use crate::rl::env::{sample_input, AgentState, AlgorithmicEnv, Alphabet, EnvKind, EpisodeLengths};
use crate::rl::fdp::{FdpRow, FdpStats};
use crate::rl::replay::{MaskId, ReplayTransition};
use crate::rng::{self, streams};

pub const COPY_TASK: TaskId = TaskId(0);
pub const DROP_TASK: TaskId = TaskId(1);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlConfig {
    pub alphabet: String,
    /// One-hot slots per symbol field of the state.
    pub symbol_capacity: usize,
    pub num_actions: usize,
    pub hidden_width: usize,
    pub gamma: f64,
    pub replay_capacity: usize,
    pub learning_rate: f64,
    pub rms_alpha: f64,
    pub rms_eps: f64,
    pub batch_size: usize,
    /// Environment steps between target-network copies.
    pub sync_interval: usize,
    pub epsilon: EpsilonSchedule,
    /// Transitions collected before the first update.
    pub learn_start: usize,
    pub copy_threshold: f64,
    pub drop_threshold: f64,
    pub eval_trials: usize,
    /// Environment steps between greedy evaluations.
    pub eval_interval: usize,
    pub copy_max_steps: usize,
    pub retrain_max_steps: usize,
    pub drop_max_steps: usize,
    pub lengths: EpisodeLengths,
    pub evo: EvoConfig,
    /// Greedy episodes per genome.
    pub fitness_episodes: usize,
    pub controller: ControllerConfig,
    /// States per task used to train the controller.
    pub controller_samples: usize,
    /// Keep the shared output bias fixed after the copy task.
    pub freeze_head: bool,
    /// Environment steps between metric records.
    pub metrics_interval: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            alphabet: "ABCDE".into(),
            symbol_capacity: 13,
            num_actions: 20,
            hidden_width: 128,
            gamma: 0.99,
            replay_capacity: 1_000_000,
            learning_rate: 0.00025,
            rms_alpha: 0.95,
            rms_eps: 0.01,
            batch_size: 64,
            sync_interval: 1000,
            epsilon: EpsilonSchedule::default(),
            learn_start: 1000,
            copy_threshold: 25.0,
            drop_threshold: 15.0,
            eval_trials: 100,
            eval_interval: 1000,
            copy_max_steps: 90_000,
            retrain_max_steps: 90_000,
            drop_max_steps: 165_000,
            lengths: EpisodeLengths::default(),
            evo: EvoConfig {
                sparsity_weight: 10.0,
                overlap_penalty: 0.0,
                ..EvoConfig::default()
            },
            fitness_episodes: 20,
            controller: ControllerConfig {
                hidden: vec![128],
                epochs: 20,
                ..ControllerConfig::default()
            },
            controller_samples: 2000,
            freeze_head: false,
            metrics_interval: 100,
        }
    }
}

impl RlConfig {
    pub fn alphabet(&self) -> Result<Alphabet> {
        Alphabet::new(&self.alphabet, self.symbol_capacity)
    }

    pub fn validate(&self) -> Result<()> {
        self.alphabet()?;
        if self.num_actions <= self.alphabet.chars().count() {
            return Err(AfmError::Config(format!(
                "num_actions {} must exceed the alphabet size to leave room for skip",
                self.num_actions
            )));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("sync_interval", self.sync_interval),
            ("eval_interval", self.eval_interval),
            ("eval_trials", self.eval_trials),
            ("metrics_interval", self.metrics_interval),
            ("hidden_width", self.hidden_width),
            ("fitness_episodes", self.fitness_episodes),
        ] {
            if v == 0 {
                return Err(AfmError::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(AfmError::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        let l = &self.lengths;
        if l.copy_min == 0 || l.copy_min > l.copy_max || l.drop_target_min == 0 || l.drop_target_min > l.drop_target_max {
            return Err(AfmError::Config("episode length ranges must be non-empty and positive".into()));
        }
        self.evo.validate()
    }

    pub fn q_learner(&self) -> QLearnerConfig {
        QLearnerConfig {
            gamma: self.gamma,
            batch_size: self.batch_size,
            learn_start: self.learn_start,
            sync_interval: self.sync_interval,
            replay_capacity: self.replay_capacity,
            symbol_capacity: self.symbol_capacity,
        }
    }

    pub fn optimizer(&self) -> OptimizerState {
        OptimizerState::new(OptimizerKind::rmsprop(self.rms_alpha, self.rms_eps), self.learning_rate)
    }
}

/// Mean greedy episode reward of `net` under `mask` on the given inputs.
/// Episodes run side by side, one batched forward per time step.
pub fn evaluate_policy(net: &Network, mask: &NeuronMask, kind: EnvKind, alphabet: &Alphabet, num_actions: usize, inputs: &[Vec<u8>]) -> Result<f64> {
    if inputs.is_empty() {
        return Ok(0.0);
    }
    let mut envs = Vec::with_capacity(inputs.len());
    let mut states = Vec::with_capacity(inputs.len());
    for input in inputs {
        let mut env = AlgorithmicEnv::new(kind, alphabet.clone(), num_actions)?;
        states.push(env.reset(input)?);
        envs.push(env);
    }
    loop {
        let active: Vec<usize> = (0..envs.len()).filter(|&i| !envs[i].is_done()).collect();
        if active.is_empty() {
            break;
        }
        let batch: Vec<AgentState> = active.iter().map(|&i| states[i]).collect();
        let q = q_forward(net, mask, &encode_states(&batch, alphabet.capacity()))?;
        for (r, &i) in active.iter().enumerate() {
            states[i] = envs[i].step(argmax(q.row(r)))?.state;
        }
    }
    Ok(envs.iter().map(AlgorithmicEnv::episode_reward).sum::<f64>() / envs.len() as f64)
}

/// `n` inputs drawn from the evaluation stream `index` of `seed`.
pub fn evaluation_inputs(kind: EnvKind, alphabet: &Alphabet, lengths: &EpisodeLengths, n: usize, seed: u64, index: u64) -> Vec<Vec<u8>> {
    let mut r = rng::substream(seed, streams::EVAL, index);
    (0..n).map(|_| sample_input(kind, alphabet, lengths, &mut r)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseStatus {
    Reached,
    Timeout,
    Done,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseOutcome {
    pub phase: String,
    pub status: PhaseStatus,
    /// Environment steps taken (0 for phases without an environment).
    pub steps: usize,
    pub threshold: Option<f64>,
    /// Latest greedy evaluation reward.
    pub final_reward: Option<f64>,
}

impl PhaseOutcome {
    fn skipped(phase: &str) -> Self {
        Self {
            phase: phase.into(),
            status: PhaseStatus::Skipped,
            steps: 0,
            threshold: None,
            final_reward: None,
        }
    }

    pub fn completed(&self) -> bool {
        matches!(self.status, PhaseStatus::Reached | PhaseStatus::Done)
    }
}

pub const PHASES: [&str; 5] = ["copy", "search", "controller", "copy-masked", "drop-duplicate"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RlReport {
    pub phases: Vec<PhaseOutcome>,
    pub copy_mask_active: Option<usize>,
    /// Copy reward under the copy mask after the last phase.
    pub copy_retention_reward: Option<f64>,
    /// Largest change among parameters attached only to copy neurons,
    /// across the duplicate-dropping phase.
    pub copy_params_max_change: Option<f64>,
    /// Share of held-out states for which the controller emits the right
    /// mask, per task.
    pub controller_match: Option<[f64; 2]>,
    /// Greedy rewards on the fixed probe strings.
    pub copy_probe_reward: Option<f64>,
    pub drop_probe_reward: Option<f64>,
    pub fdp: Vec<FdpRow>,
    pub completed: bool,
}

#[derive(Debug, Clone)]
pub struct RlOutcome {
    pub report: RlReport,
    pub net: Network,
    pub controller: ControllerNet,
    pub masks: MaskTable,
}

struct PhaseRun<'a> {
    name: &'a str,
    kind: EnvKind,
    task: TaskId,
    mask: &'a NeuronMask,
    mask_id: MaskId,
    threshold: f64,
    max_steps: usize,
    frozen: FrozenTensors,
    index: u64,
}

struct Learner<'a> {
    cfg: &'a RlConfig,
    alphabet: Alphabet,
    seed: u64,
    net: Network,
    fdp: FdpStats,
}

impl Learner<'_> {
    fn eval_inputs(&self, kind: EnvKind) -> Vec<Vec<u8>> {
        let index = match kind {
            EnvKind::Copy => 0,
            EnvKind::DropDuplicate => 1,
        };
        evaluation_inputs(kind, &self.alphabet, &self.cfg.lengths, self.cfg.eval_trials, self.seed, index)
    }

    /// Trains until the greedy evaluation reaches the threshold or the step
    /// budget runs out.
    fn train(&mut self, run: PhaseRun<'_>, opt: &mut OptimizerState, log: &mut MetricsLog) -> Result<PhaseOutcome> {
        let cfg = self.cfg;
        let capacity = self.alphabet.capacity();
        let eval_inputs = self.eval_inputs(run.kind);
        let mut env = AlgorithmicEnv::new(run.kind, self.alphabet.clone(), cfg.num_actions)?;
        let mut q = QLearner::new(&self.net, cfg.q_learner())?;
        let mut env_rng = rng::substream(self.seed, streams::ENV, run.index);
        let mut explore = rng::substream(self.seed, streams::EXPLORE, run.index);
        let mut sampler = rng::substream(self.seed, streams::REPLAY, run.index);
        let mut state = env.reset(&sample_input(run.kind, &self.alphabet, &cfg.lengths, &mut env_rng))?;
        let (mut loss_sum, mut loss_count) = (0.0, 0usize);
        let mut last_eval: Option<f64> = None;
        let mut status = PhaseStatus::Timeout;
        let mut steps = 0;
        for step in 1..=run.max_steps {
            steps = step;
            let epsilon = cfg.epsilon.value(step - 1, run.max_steps);
            let values = q_forward(&self.net, run.mask, &encode_states(&[state], capacity))?;
            let action = epsilon_greedy(values.row(0), epsilon, &mut explore);
            let out = env.step(action)?;
            let transition = ReplayTransition {
                task: run.task,
                mask: run.mask_id,
                state,
                action,
                reward: out.reward,
                next_state: out.state,
                terminal: out.terminal,
            };
            state = out.state;
            if out.terminal {
                self.fdp.record(run.task, run.mask_id, run.task, &[env.episode_reward()]);
                state = env.reset(&sample_input(run.kind, &self.alphabet, &cfg.lengths, &mut env_rng))?;
            }
            if let Some(loss) = q.step(&mut self.net, opt, transition, run.mask, &run.frozen, &mut sampler)? {
                loss_sum += loss;
                loss_count += 1;
            }
            let mut reached = false;
            if step % cfg.eval_interval == 0 {
                let reward = evaluate_policy(&self.net, run.mask, run.kind, &self.alphabet, cfg.num_actions, &eval_inputs)?;
                last_eval = Some(reward);
                reached = reward >= run.threshold;
            }
            if step % cfg.metrics_interval == 0 {
                let loss = if loss_count > 0 { loss_sum / loss_count as f64 } else { f64::NAN };
                log.push(
                    run.name,
                    step as u64,
                    &[
                        ("mean_reward", last_eval.unwrap_or(f64::NAN)),
                        ("epsilon", epsilon),
                        ("loss", loss),
                    ],
                )?;
                loss_sum = 0.0;
                loss_count = 0;
            }
            if reached {
                status = PhaseStatus::Reached;
                break;
            }
        }
        if !self.net.is_finite() {
            return Err(AfmError::Numeric(format!("Q-network parameters after phase `{}`", run.name)));
        }
        Ok(PhaseOutcome {
            phase: run.name.into(),
            status,
            steps,
            threshold: Some(run.threshold),
            final_reward: last_eval,
        })
    }
}

/// States visited by a perfect policy on random inputs.
fn oracle_states(kind: EnvKind, alphabet: &Alphabet, cfg: &RlConfig, n: usize, seed: u64, index: u64) -> Result<Vec<AgentState>> {
    let mut r = rng::substream(seed, streams::CONTROLLER_DATA, index);
    let mut env = AlgorithmicEnv::new(kind, alphabet.clone(), cfg.num_actions)?;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut s = env.reset(&sample_input(kind, alphabet, &cfg.lengths, &mut r))?;
        while let Some(a) = env.correct_action() {
            out.push(s);
            if out.len() == n {
                break;
            }
            s = env.step(a)?.state;
        }
    }
    Ok(out)
}

/// Largest change among parameters attached only to neurons of `mask`.
pub fn exclusive_param_change(before: &Network, after: &Network, mask: &NeuronMask) -> f64 {
    let mut max: f64 = 0.0;
    let (h0, h1) = (&before.layers[0], &after.layers[0]);
    let (o0, o1) = (&before.layers[1], &after.layers[1]);
    for j in mask.active_indices() {
        for i in 0..h0.fan_in() {
            max = max.max((h0.weights.get(i, j) - h1.weights.get(i, j)).abs());
        }
        max = max.max((h0.bias[j] - h1.bias[j]).abs());
        for c in 0..o0.fan_out() {
            max = max.max((o0.weights.get(j, c) - o1.weights.get(j, c)).abs());
        }
    }
    max
}

/// Runs all phases. A phase that misses its threshold within its budget
/// ends the run early; the report marks it as a timeout and the remaining
/// phases as skipped.
pub fn run_afm_rl(cfg: &RlConfig, seed: u64, log: &mut MetricsLog) -> Result<RlOutcome> {
    cfg.validate()?;
    let alphabet = cfg.alphabet()?;
    let capacity = alphabet.capacity();
    let width = cfg.hidden_width;
    let net = Network::mlp(
        &[alphabet.state_width(), width, cfg.num_actions],
        &mut rng::stream(seed, streams::INIT_NET),
    )?;
    let mut controller = ControllerNet::from_config(
        alphabet.state_width(),
        width,
        &cfg.controller,
        &mut rng::stream(seed, streams::INIT_CONTROLLER),
    )?;
    let mut learner = Learner {
        cfg,
        alphabet: alphabet.clone(),
        seed,
        net,
        fdp: FdpStats::new(),
    };
    let mut phases = Vec::new();
    let mut report = RlReport {
        phases: Vec::new(),
        copy_mask_active: None,
        copy_retention_reward: None,
        copy_params_max_change: None,
        controller_match: None,
        copy_probe_reward: None,
        drop_probe_reward: None,
        fdp: Vec::new(),
        completed: false,
    };
    let finish = |mut report: RlReport, mut phases: Vec<PhaseOutcome>, learner: Learner<'_>, controller, masks| {
        for name in PHASES.iter().skip(phases.len()) {
            phases.push(PhaseOutcome::skipped(name));
        }
        report.completed = phases.iter().all(PhaseOutcome::completed);
        report.phases = phases;
        report.fdp = learner.fdp.estimates().rows();
        RlOutcome {
            report,
            net: learner.net,
            controller,
            masks,
        }
    };

    let all_ones = NeuronMask::ones(width);
    let mut copy_opt = cfg.optimizer();
    let outcome = learner.train(
        PhaseRun {
            name: PHASES[0],
            kind: EnvKind::Copy,
            task: COPY_TASK,
            mask: &all_ones,
            mask_id: MaskId(0),
            threshold: cfg.copy_threshold,
            max_steps: cfg.copy_max_steps,
            frozen: FrozenTensors::none(),
            index: 0,
        },
        &mut copy_opt,
        log,
    )?;
    let reached = outcome.completed();
    phases.push(outcome);
    if !reached {
        return Ok(finish(report, phases, learner, controller, MaskTable::new()));
    }

    let fitness_inputs = evaluation_inputs(EnvKind::Copy, &alphabet, &cfg.lengths, cfg.fitness_episodes, seed, 2);
    let search_net = learner.net.clone();
    let fitness = |m: &NeuronMask| evaluate_policy(&search_net, m, EnvKind::Copy, &alphabet, cfg.num_actions, &fitness_inputs);
    let search = evolve(width, &fitness, &[], &cfg.evo, &mut rng::stream(seed, streams::EVO))?;
    for (g, f) in search.trace.iter().enumerate() {
        log.push(PHASES[1], g as u64, &[("best_fitness", *f)])?;
    }
    let copy_mask = search.best.clone().with_task(COPY_TASK);
    let drop_mask = copy_mask.complement().with_task(DROP_TASK);
    if drop_mask.is_all_zero() {
        return Err(AfmError::DegenerateMask(
            "the copy mask uses every neuron, leaving none for duplicate dropping".into(),
        ));
    }
    report.copy_mask_active = Some(copy_mask.count_active());
    phases.push(PhaseOutcome {
        phase: PHASES[1].into(),
        status: PhaseStatus::Done,
        steps: 0,
        threshold: None,
        final_reward: Some(search.best_fitness),
    });
    let masks: MaskTable = [(COPY_TASK, copy_mask.clone()), (DROP_TASK, drop_mask.clone())].into();

    let copy_states = oracle_states(EnvKind::Copy, &alphabet, cfg, cfg.controller_samples, seed, 0)?;
    let drop_states = oracle_states(EnvKind::DropDuplicate, &alphabet, cfg, cfg.controller_samples, seed, 1)?;
    let mut all_states = copy_states.clone();
    all_states.extend_from_slice(&drop_states);
    let mut tasks = vec![COPY_TASK; copy_states.len()];
    tasks.extend(std::iter::repeat_n(DROP_TASK, drop_states.len()));
    let losses = train_controller(
        &mut controller,
        &mut OptimizerState::adam(cfg.controller.learning_rate),
        &encode_states(&all_states, capacity),
        &tasks,
        &masks,
        cfg.controller.epochs,
        cfg.controller.batch_size,
        &mut rng::stream(seed, streams::CONTROLLER_DATA),
    )?;
    for (e, l) in losses.iter().enumerate() {
        log.push(PHASES[2], e as u64, &[("loss", *l)])?;
    }
    let held_copy = oracle_states(EnvKind::Copy, &alphabet, cfg, cfg.controller_samples, seed, 2)?;
    let held_drop = oracle_states(EnvKind::DropDuplicate, &alphabet, cfg, cfg.controller_samples, seed, 3)?;
    report.controller_match = Some([
        controller.exact_match_rate(&encode_states(&held_copy, capacity), &vec![COPY_TASK; held_copy.len()], &masks)?,
        controller.exact_match_rate(&encode_states(&held_drop, capacity), &vec![DROP_TASK; held_drop.len()], &masks)?,
    ]);
    phases.push(PhaseOutcome {
        phase: PHASES[2].into(),
        status: PhaseStatus::Done,
        steps: 0,
        threshold: None,
        final_reward: None,
    });

    let outcome = learner.train(
        PhaseRun {
            name: PHASES[3],
            kind: EnvKind::Copy,
            task: COPY_TASK,
            mask: &copy_mask,
            mask_id: MaskId(1),
            threshold: cfg.copy_threshold,
            max_steps: cfg.retrain_max_steps,
            frozen: FrozenTensors::none(),
            index: 3,
        },
        &mut copy_opt,
        log,
    )?;
    let reached = outcome.completed();
    phases.push(outcome);
    if !reached {
        return Ok(finish(report, phases, learner, controller, masks));
    }
    learner.fdp.record(COPY_TASK, MaskId(1), DROP_TASK, &[]);

    let snapshot = learner.net.clone();
    let frozen = if cfg.freeze_head {
        FrozenTensors::none().freeze_bias(1)
    } else {
        FrozenTensors::none()
    };
    let outcome = learner.train(
        PhaseRun {
            name: PHASES[4],
            kind: EnvKind::DropDuplicate,
            task: DROP_TASK,
            mask: &drop_mask,
            mask_id: MaskId(2),
            threshold: cfg.drop_threshold,
            max_steps: cfg.drop_max_steps,
            frozen,
            index: 4,
        },
        &mut cfg.optimizer(),
        log,
    )?;
    phases.push(outcome);

    let copy_eval = learner.eval_inputs(EnvKind::Copy);
    report.copy_retention_reward = Some(evaluate_policy(&learner.net, &copy_mask, EnvKind::Copy, &alphabet, cfg.num_actions, &copy_eval)?);
    report.copy_params_max_change = Some(exclusive_param_change(&snapshot, &learner.net, &copy_mask));
    let probe = |kind, text: &str, mask: &NeuronMask| -> Result<f64> {
        let input = alphabet.encode(text)?;
        evaluate_policy(&learner.net, mask, kind, &alphabet, cfg.num_actions, &[input])
    };
    report.copy_probe_reward = Some(probe(EnvKind::Copy, crate::rl::env::COPY_PROBE, &copy_mask)?);
    report.drop_probe_reward = Some(probe(EnvKind::DropDuplicate, crate::rl::env::DROP_DUPLICATE_PROBE, &drop_mask)?);
    Ok(finish(report, phases, learner, controller, masks))
}
