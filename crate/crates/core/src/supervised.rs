//! Multitask classification with per-task neuron masks.
//!
//! The forgetting network has one masked hidden layer and an output layer
//! shared by every task. Training follows this order:
//!
//! 1. train on the first task with every neuron active;
//! 2. find the first task's mask (variational dropout or genetic search);
//! 3. sweep over the tasks: train the network on each task gated by its
//!    mask, then train the controller on a mixed stream of all tasks'
//!    samples. A task met for the first time is first trained on the neurons
//!    no earlier task owns, and its mask is searched among those neurons.
//!
//! Sweeps repeat until no task's validation accuracy has improved for
//! `patience` sweeps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::controller::{train_controller, ControllerConfig, ControllerNet, EmitMode, MaskTable};
use crate::data::{self, LabeledDataset, NUM_CLASSES};
use crate::error::{AfmError, Result};
use crate::evo::{evolve, EvoConfig};
use crate::mask::{NeuronMask, TaskId};
use crate::matrix::Matrix2D;
use crate::metrics::MetricsLog;
use crate::nn::{accuracy, train_classifier_epoch, FrozenTensors, Network, OptimizerState};
use crate::rng::{self, streams};
use crate::sparsify::{train_sparse, SparsifyConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskFinder {
    Variational,
    Evolutionary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSource {
    /// Stored task masks.
    Oracle,
    /// Masks emitted by the controller from each sample.
    Controller,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskStatus {
    Untrained,
    MaskFound,
    Trained,
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub id: TaskId,
    pub name: String,
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub test: LabeledDataset,
    pub mask: Option<NeuronMask>,
    pub status: TaskStatus,
}

impl TaskSpec {
    pub fn new(id: TaskId, name: impl Into<String>, train: LabeledDataset, validation: LabeledDataset, test: LabeledDataset) -> Self {
        Self {
            id,
            name: name.into(),
            train,
            validation,
            test,
            mask: None,
            status: TaskStatus::Untrained,
        }
    }

    /// Holds out `validation_fraction` of `train` for validation.
    pub fn from_train_test(
        id: TaskId,
        name: impl Into<String>,
        train: &LabeledDataset,
        test: LabeledDataset,
        validation_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        let (fit, validation) = data::split(train, 1.0 - validation_fraction, seed)?;
        Ok(Self::new(id, name, fit, validation, test))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisedConfig {
    pub hidden_width: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs on a newly met task before its mask is searched.
    pub pretrain_epochs: usize,
    /// Epochs per task within one sweep.
    pub epochs: usize,
    pub max_sweeps: usize,
    /// Sweeps without a validation improvement before stopping.
    pub patience: usize,
    pub mask_finder: MaskFinder,
    pub sparsify: SparsifyConfig,
    pub evo: EvoConfig,
    /// Validation rows used to score each genome.
    pub evo_eval_samples: usize,
    pub controller: ControllerConfig,
    /// Training rows per task fed to the controller; `None` uses all.
    pub controller_samples_per_task: Option<usize>,
    /// Keep the shared output bias fixed once the first task is trained.
    pub freeze_head: bool,
    pub validation_fraction: f64,
    /// Learning rate of the plain sequential baseline.
    pub baseline_learning_rate: f64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            hidden_width: 128,
            batch_size: 64,
            learning_rate: 0.001,
            pretrain_epochs: 100,
            epochs: 100,
            max_sweeps: 10,
            patience: 3,
            mask_finder: MaskFinder::Variational,
            sparsify: SparsifyConfig::default(),
            evo: EvoConfig::default(),
            evo_eval_samples: 1000,
            controller: ControllerConfig::default(),
            controller_samples_per_task: None,
            freeze_head: false,
            validation_fraction: 0.1,
            baseline_learning_rate: 0.01,
        }
    }
}

impl SupervisedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 {
            return Err(AfmError::Config("hidden_width must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(AfmError::Config("batch_size must be positive".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(AfmError::Config(format!(
                "validation_fraction {} outside (0, 1)",
                self.validation_fraction
            )));
        }
        self.sparsify.validate()?;
        self.evo.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRecord {
    pub sweep: usize,
    /// Validation accuracy of every task (stored masks), in task order.
    pub validation_accuracy: Vec<f64>,
    pub controller_loss: f64,
}

/// Retention of one task across the training of later tasks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForgettingReport {
    pub task: TaskId,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub accuracy_drop: f64,
    /// Largest change among parameters attached only to this task's
    /// neurons: their incoming weights, hidden biases and output rows.
    pub max_abs_change: f64,
    pub exclusive_neurons: usize,
}

impl ForgettingReport {
    pub fn exclusive_parameters_unchanged(&self) -> bool {
        self.max_abs_change == 0.0
    }
}

#[derive(Debug, Clone)]
pub struct AfmModel {
    /// `[input, hidden, classes]`; the hidden layer is masked.
    pub net: Network,
    pub controller: ControllerNet,
    pub masks: MaskTable,
    pub task_order: Vec<TaskId>,
    pub status: BTreeMap<TaskId, TaskStatus>,
    /// One network optimizer per task, so momentum from one task never
    /// moves parameters gated out for another.
    pub optimizers: BTreeMap<TaskId, OptimizerState>,
    pub controller_optimizer: OptimizerState,
    pub history: Vec<SweepRecord>,
    /// First task's retention across the first training of the others.
    pub retention: Option<ForgettingReport>,
    /// Set when the run could not train.
    pub error: Option<String>,
    pub seed: u64,
}

impl AfmModel {
    pub fn new(input: usize, cfg: &SupervisedConfig, task_order: Vec<TaskId>, seed: u64) -> Result<Self> {
        let net = Network::mlp(&[input, cfg.hidden_width, NUM_CLASSES], &mut rng::stream(seed, streams::INIT_NET))?;
        let controller = ControllerNet::from_config(
            input,
            cfg.hidden_width,
            &cfg.controller,
            &mut rng::stream(seed, streams::INIT_CONTROLLER),
        )?;
        let optimizers = task_order
            .iter()
            .map(|&t| (t, OptimizerState::adam(cfg.learning_rate)))
            .collect();
        Ok(Self {
            net,
            controller,
            masks: MaskTable::new(),
            status: task_order.iter().map(|&t| (t, TaskStatus::Untrained)).collect(),
            task_order,
            optimizers,
            controller_optimizer: OptimizerState::adam(cfg.controller.learning_rate),
            history: Vec::new(),
            retention: None,
            error: None,
            seed,
        })
    }

    pub fn hidden_width(&self) -> usize {
        self.net.layers[0].fan_out()
    }

    /// Union of every stored mask.
    pub fn owned_neurons(&self) -> Result<NeuronMask> {
        NeuronMask::union_of(self.hidden_width(), self.masks.values())
    }

    pub fn total_active_neurons(&self) -> usize {
        self.masks.values().map(NeuronMask::count_active).sum()
    }

    /// Sum of pairwise overlaps between stored masks.
    pub fn mask_overlap(&self) -> Result<usize> {
        let masks: Vec<&NeuronMask> = self.masks.values().collect();
        let mut total = 0;
        for i in 0..masks.len() {
            for j in i + 1..masks.len() {
                total += masks[i].overlap(masks[j])?;
            }
        }
        Ok(total)
    }
}

fn frozen_for(cfg: &SupervisedConfig, head_locked: bool) -> FrozenTensors {
    if cfg.freeze_head && head_locked {
        FrozenTensors::none().freeze_bias(1)
    } else {
        FrozenTensors::none()
    }
}

/// Trains `model.net` on `task` for `epochs` epochs gated by `gate`.
fn train_v(
    model: &mut AfmModel,
    task: &TaskSpec,
    gate: Option<&NeuronMask>,
    epochs: usize,
    cfg: &SupervisedConfig,
    frozen: &FrozenTensors,
    round: u64,
) -> Result<f64> {
    let mut shuffle = rng::substream(model.seed, streams::SHUFFLE, ((task.id.0 as u64) << 16) | round);
    let opt = model
        .optimizers
        .get_mut(&task.id)
        .ok_or_else(|| AfmError::Config(format!("no optimizer for {}", task.id)))?;
    let masks = [gate, None];
    let mut loss = 0.0;
    for _ in 0..epochs {
        loss = train_classifier_epoch(
            &mut model.net,
            opt,
            &task.train.images,
            &task.train.labels,
            &masks,
            cfg.batch_size,
            frozen,
            &mut shuffle,
        )?;
    }
    Ok(loss)
}

/// Searches `task`'s mask among the neurons no earlier task owns.
fn find_mask(model: &AfmModel, task: &TaskSpec, cfg: &SupervisedConfig, seed: u64) -> Result<NeuronMask> {
    let owned = model.owned_neurons()?;
    let prev: Vec<NeuronMask> = model.masks.values().cloned().collect();
    let mask = match cfg.mask_finder {
        MaskFinder::Variational => {
            let frozen = (!owned.is_all_zero()).then_some(&owned);
            let idx = task.id.0 as u64;
            train_sparse(
                &task.train,
                &model.net,
                &cfg.sparsify,
                frozen,
                &mut rng::substream(seed, streams::VD_NOISE, 2 * idx),
                &mut rng::substream(seed, streams::VD_NOISE, 2 * idx + 1),
            )?
            .mask
        }
        MaskFinder::Evolutionary => {
            let probe = task.validation.head(cfg.evo_eval_samples);
            let net = &model.net;
            let score = |m: &NeuronMask| accuracy(net, &probe.images, &probe.labels, &[Some(m), None]);
            evolve(
                model.hidden_width(),
                &score,
                &prev,
                &cfg.evo,
                &mut rng::substream(seed, streams::EVO, task.id.0 as u64),
            )?
            .best
        }
    };
    Ok(mask.with_task(task.id))
}

/// Mixed controller stream: up to `limit` training rows of every task.
fn controller_stream(tasks: &[TaskSpec], limit: Option<usize>) -> Result<(Matrix2D, Vec<TaskId>)> {
    let parts: Vec<LabeledDataset> = tasks
        .iter()
        .map(|t| t.train.head(limit.unwrap_or(usize::MAX)))
        .collect();
    let width = tasks[0].train.width();
    let rows: usize = parts.iter().map(LabeledDataset::len).sum();
    let mut data = Vec::with_capacity(rows * width);
    let mut ids = Vec::with_capacity(rows);
    for (t, p) in tasks.iter().zip(&parts) {
        data.extend_from_slice(p.images.as_slice());
        ids.extend(std::iter::repeat_n(t.id, p.len()));
    }
    Ok((Matrix2D::from_vec(rows, width, data)?, ids))
}

fn validation_accuracies(model: &AfmModel, tasks: &[TaskSpec]) -> Result<Vec<f64>> {
    tasks
        .iter()
        .map(|t| {
            let mask = model.masks.get(&t.id);
            accuracy(&model.net, &t.validation.images, &t.validation.labels, &[mask, None])
        })
        .collect()
}

/// Runs the full training procedure. `tasks` receive their masks and
/// status. With zero epochs nothing is trained and the returned model
/// carries an error message instead.
pub fn train_multitask(tasks: &mut [TaskSpec], cfg: &SupervisedConfig, seed: u64, log: &mut MetricsLog) -> Result<AfmModel> {
    cfg.validate()?;
    let first = tasks.first().ok_or_else(|| AfmError::Config("no tasks configured".into()))?;
    let input = first.train.width();
    if let Some(t) = tasks.iter().find(|t| t.train.width() != input || t.test.width() != input) {
        return Err(AfmError::Consistency(format!("task `{}` has a different input width", t.name)));
    }
    let order: Vec<TaskId> = tasks.iter().map(|t| t.id).collect();
    let mut model = AfmModel::new(input, cfg, order, seed)?;
    if cfg.epochs == 0 || cfg.pretrain_epochs == 0 || cfg.max_sweeps == 0 {
        model.error = Some("zero training epochs or sweeps configured; model left untrained".into());
        return Ok(model);
    }
    let (cx, ctasks) = controller_stream(tasks, cfg.controller_samples_per_task)?;
    let mut controller_shuffle = rng::stream(seed, streams::CONTROLLER_DATA);

    let mut best = vec![f64::NEG_INFINITY; tasks.len()];
    let mut stale = 0usize;
    let mut retention_snapshot: Option<(Network, f64)> = None;
    for sweep in 0..cfg.max_sweeps {
        for k in 0..tasks.len() {
            let head_locked = !(k == 0 && sweep == 0);
            let frozen = frozen_for(cfg, head_locked);
            if tasks[k].mask.is_none() {
                if k == 1 && tasks[0].status == TaskStatus::Trained {
                    let acc = accuracy(&model.net, &tasks[0].test.images, &tasks[0].test.labels, &[model.masks.get(&tasks[0].id), None])?;
                    retention_snapshot = Some((model.net.clone(), acc));
                }
                let free = model.owned_neurons()?.complement();
                if free.is_all_zero() {
                    return Err(AfmError::DegenerateMask(format!(
                        "no free neurons left for task `{}`",
                        tasks[k].name
                    )));
                }
                let gate = (!free.is_all_ones()).then_some(&free);
                let loss = train_v(&mut model, &tasks[k], gate, cfg.pretrain_epochs, cfg, &frozen, 0)?;
                log.push(&format!("pretrain:{}", tasks[k].name), sweep as u64, &[("loss", loss)])?;
                let mask = find_mask(&model, &tasks[k], cfg, seed)?;
                log.push(
                    &format!("mask:{}", tasks[k].name),
                    0,
                    &[("active_neurons", mask.count_active() as f64)],
                )?;
                model.masks.insert(tasks[k].id, mask.clone());
                model.status.insert(tasks[k].id, TaskStatus::MaskFound);
                tasks[k].mask = Some(mask);
                tasks[k].status = TaskStatus::MaskFound;
            }
            let mask = tasks[k].mask.clone().expect("mask found above");
            let loss = train_v(&mut model, &tasks[k], Some(&mask), cfg.epochs, cfg, &frozen, sweep as u64 + 1)?;
            log.push(&format!("train:{}", tasks[k].name), sweep as u64, &[("loss", loss)])?;
            model.status.insert(tasks[k].id, TaskStatus::Trained);
            tasks[k].status = TaskStatus::Trained;
        }
        if sweep == 0 {
            if let Some((before, acc_before)) = retention_snapshot.take() {
                let others: Vec<NeuronMask> = tasks[1..].iter().filter_map(|t| t.mask.clone()).collect();
                model.retention = Some(forgetting_report(
                    &before,
                    &model.net,
                    tasks[0].mask.as_ref().expect("first task trained"),
                    &others,
                    &tasks[0].test,
                    acc_before,
                )?);
            }
        }
        let mut controller_loss = f64::NAN;
        if cfg.controller.epochs > 0 {
            let losses = train_controller(
                &mut model.controller,
                &mut model.controller_optimizer,
                &cx,
                &ctasks,
                &model.masks,
                cfg.controller.epochs,
                cfg.controller.batch_size,
                &mut controller_shuffle,
            )?;
            controller_loss = *losses.last().expect("epochs > 0");
        }
        let val = validation_accuracies(&model, tasks)?;
        let mut values: Vec<(String, f64)> = tasks
            .iter()
            .zip(&val)
            .map(|(t, a)| (format!("val_acc:{}", t.name), *a))
            .collect();
        values.push(("controller_loss".into(), controller_loss));
        let refs: Vec<(&str, f64)> = values.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        log.push("sweep", sweep as u64, &refs)?;
        let improved = val.iter().zip(best.iter_mut()).fold(false, |acc, (v, b)| {
            if *v > *b {
                *b = *v;
                true
            } else {
                acc
            }
        });
        model.history.push(SweepRecord {
            sweep,
            validation_accuracy: val,
            controller_loss,
        });
        stale = if improved { 0 } else { stale + 1 };
        if stale >= cfg.patience {
            break;
        }
    }
    Ok(model)
}

/// Accuracy of `net` on `data` with one mask per row, grouping rows that
/// share a mask into one forward pass.
fn accuracy_per_row_masks(net: &Network, data: &LabeledDataset, masks: &[NeuronMask]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut groups: BTreeMap<Vec<bool>, Vec<usize>> = BTreeMap::new();
    for (r, m) in masks.iter().enumerate() {
        groups.entry(m.bits().to_vec()).or_default().push(r);
    }
    let mut correct = 0usize;
    for (bits, rows) in groups {
        let mask = NeuronMask::from_bools(bits);
        let sub = data.select(&rows);
        let acc = accuracy(net, &sub.images, &sub.labels, &[Some(&mask), None])?;
        correct += (acc * rows.len() as f64).round() as usize;
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskEvaluation {
    pub task: TaskId,
    pub name: String,
    pub accuracy: f64,
    pub active_neurons: usize,
    /// Share of test rows for which the controller emitted the stored mask.
    pub mask_match_rate: Option<f64>,
}

/// Test accuracy of every task, with stored or controller-emitted masks.
pub fn evaluate_multitask(model: &AfmModel, tasks: &[TaskSpec], source: MaskSource, mode: EmitMode) -> Result<Vec<TaskEvaluation>> {
    tasks
        .iter()
        .map(|t| {
            let stored = model.masks.get(&t.id);
            let active_neurons = stored.map_or(model.hidden_width(), NeuronMask::count_active);
            let (acc, match_rate) = match source {
                MaskSource::Oracle => (accuracy(&model.net, &t.test.images, &t.test.labels, &[stored, None])?, None),
                MaskSource::Controller => {
                    let emitted = match mode {
                        EmitMode::PerSample => model.controller.emit_masks(&t.test.images)?,
                        EmitMode::MajorityVote => vec![model.controller.emit_majority(&t.test.images)?; t.test.len()],
                    };
                    let rate = stored.map(|s| {
                        emitted.iter().filter(|m| m.bits() == s.bits()).count() as f64 / emitted.len().max(1) as f64
                    });
                    (accuracy_per_row_masks(&model.net, &t.test, &emitted)?, rate)
                }
            };
            Ok(TaskEvaluation {
                task: t.id,
                name: t.name.clone(),
                accuracy: acc,
                active_neurons,
                mask_match_rate: match_rate,
            })
        })
        .collect()
}

/// Compares a snapshot taken after `mask`'s task was trained with the
/// network after later tasks were trained. `others` are the later tasks'
/// masks; neurons they share with `mask` are not counted as exclusive.
pub fn forgetting_report(
    before: &Network,
    after: &Network,
    mask: &NeuronMask,
    others: &[NeuronMask],
    test: &LabeledDataset,
    accuracy_before: f64,
) -> Result<ForgettingReport> {
    let width = mask.len();
    let shared = NeuronMask::union_of(width, others)?;
    let exclusive = mask.and(&shared.complement())?;
    let accuracy_after = accuracy(after, &test.images, &test.labels, &[Some(mask), None])?;
    let mut max_abs_change: f64 = 0.0;
    let (h0, h1) = (&before.layers[0], &after.layers[0]);
    let (o0, o1) = (&before.layers[1], &after.layers[1]);
    for j in exclusive.active_indices() {
        for i in 0..h0.fan_in() {
            max_abs_change = max_abs_change.max((h0.weights.get(i, j) - h1.weights.get(i, j)).abs());
        }
        max_abs_change = max_abs_change.max((h0.bias[j] - h1.bias[j]).abs());
        for c in 0..o0.fan_out() {
            max_abs_change = max_abs_change.max((o0.weights.get(j, c) - o1.weights.get(j, c)).abs());
        }
    }
    Ok(ForgettingReport {
        task: mask.task_id().unwrap_or(TaskId(0)),
        accuracy_before,
        accuracy_after,
        accuracy_drop: accuracy_before - accuracy_after,
        max_abs_change,
        exclusive_neurons: exclusive.count_active(),
    })
}

/// Test accuracy of every task after each task of a plain sequential run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineReport {
    /// `after_task[k][t]`: accuracy on task `t` once task `k` is trained.
    pub after_task: Vec<Vec<f64>>,
}

/// Trains one unmasked network on the tasks in order with plain SGD.
pub fn run_plain_sgd(tasks: &[TaskSpec], cfg: &SupervisedConfig, seed: u64) -> Result<BaselineReport> {
    cfg.validate()?;
    let first = tasks.first().ok_or_else(|| AfmError::Config("no tasks configured".into()))?;
    let mut net = Network::mlp(
        &[first.train.width(), cfg.hidden_width, NUM_CLASSES],
        &mut rng::stream(seed, streams::INIT_BASELINE),
    )?;
    let mut opt = OptimizerState::sgd(cfg.baseline_learning_rate);
    let mut shuffle = rng::stream(seed, streams::SHUFFLE);
    let mut after_task = Vec::with_capacity(tasks.len());
    for task in tasks {
        for _ in 0..cfg.epochs {
            train_classifier_epoch(
                &mut net,
                &mut opt,
                &task.train.images,
                &task.train.labels,
                &[],
                cfg.batch_size,
                &FrozenTensors::none(),
                &mut shuffle,
            )?;
        }
        after_task.push(
            tasks
                .iter()
                .map(|t| accuracy(&net, &t.test.images, &t.test.labels, &[]))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(BaselineReport { after_task })
}
