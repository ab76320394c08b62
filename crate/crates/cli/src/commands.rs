//! Subcommand bodies. Each writes its artifacts into the output directory
//! and returns the path of the report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use afm_core::checkpoint::{self, Checkpoint};
use afm_core::controller::{ControllerNet, EmitMode, MaskTable};
use afm_core::data::{load_idx, IdxPaths, LabeledDataset, NUM_CLASSES};
use afm_core::evo::evolve;
use afm_core::metrics::MetricsLog;
use afm_core::nn::{accuracy, train_classifier_epoch, FrozenTensors, Network, OptimizerState};
use afm_core::rl::env::{COPY_PROBE, DROP_DUPLICATE_PROBE};
use afm_core::rl::pipeline::{evaluate_policy, evaluation_inputs, COPY_TASK, DROP_TASK};
use afm_core::rl::{run_afm_rl, EnvKind, RlReport};
use afm_core::rng::{self, streams};
use afm_core::sparsify::{train_sparse, SparsifyEpoch};
use afm_core::supervised::{
    evaluate_multitask, train_multitask, AfmModel, ForgettingReport, MaskSource, TaskEvaluation, TaskSpec,
};
use afm_core::{NeuronMask, TaskId};
use serde::Serialize;

use crate::config::{to_toml, ExperimentConfig};
use crate::error::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.toml";

const MNIST: &str = "mnist";
const FASHION: &str = "fashion";

fn prepare_out_dir(cfg: &ExperimentConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::config(format!("cannot create output directory {}: {e}", cfg.out_dir.display())))?;
    write_file(&cfg.out_dir.join(CONFIG_FILE), to_toml(cfg).as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))
}

fn write_report<T: Serialize>(cfg: &ExperimentConfig, report: &T) -> Result<PathBuf, CliError> {
    let path = cfg.out_dir.join(REPORT_FILE);
    let mut text = serde_json::to_string_pretty(report).map_err(|e| CliError::internal(e.to_string()))?;
    text.push('\n');
    write_file(&path, text.as_bytes())?;
    Ok(path)
}

/// One row per record; metric columns are the union of names, blank when a
/// record lacks one.
pub fn write_metrics_csv(path: &Path, log: &MetricsLog) -> Result<(), CliError> {
    let names = log.metric_names();
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))?;
    let mut header = vec!["run_id".to_string(), "phase".into(), "step".into()];
    header.extend(names.iter().cloned());
    header.push("wall_clock_ms".into());
    let fail = |e: csv::Error| CliError::config(format!("cannot write {}: {e}", path.display()));
    w.write_record(&header).map_err(fail)?;
    for r in log.records() {
        let mut row = vec![log.run_id.clone(), r.phase.clone(), r.step.to_string()];
        row.extend(names.iter().map(|n| r.values.get(n).map(|v| v.to_string()).unwrap_or_default()));
        row.push(r.wall_clock_ms.to_string());
        w.write_record(&row).map_err(fail)?;
    }
    w.flush().map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))
}

fn finish(cfg: &ExperimentConfig, log: &MetricsLog, ckpt: &Checkpoint) -> Result<(), CliError> {
    write_metrics_csv(&cfg.out_dir.join(METRICS_FILE), log)?;
    ckpt.save(&cfg.out_dir.join(CHECKPOINT_FILE))?;
    Ok(())
}

fn dataset_dir<'a>(cfg: &'a ExperimentConfig, name: &str) -> &'a Path {
    if name == MNIST {
        &cfg.data.mnist_dir
    } else {
        &cfg.data.fashion_dir
    }
}

fn limit(d: LabeledDataset, n: usize) -> LabeledDataset {
    if n == 0 {
        d
    } else {
        d.head(n)
    }
}

/// Loads one dataset as a task; a missing file is a usage error naming it.
pub fn load_task(cfg: &ExperimentConfig, name: &str, id: TaskId) -> Result<TaskSpec, CliError> {
    let paths = IdxPaths::in_dir(dataset_dir(cfg, name));
    if let Some(missing) = paths.first_missing() {
        return Err(CliError::config(format!("dataset file not found: {}", missing.display())));
    }
    let train = limit(load_idx(&paths.train_images, &paths.train_labels, name)?, cfg.data.train_limit);
    let test = limit(load_idx(&paths.test_images, &paths.test_labels, name)?, cfg.data.test_limit);
    Ok(TaskSpec::from_train_test(
        id,
        name,
        &train,
        test,
        cfg.supervised.validation_fraction,
        cfg.seed,
    )?)
}

fn both_tasks(cfg: &ExperimentConfig) -> Result<Vec<TaskSpec>, CliError> {
    Ok(vec![load_task(cfg, MNIST, TaskId(0))?, load_task(cfg, FASHION, TaskId(1))?])
}

#[derive(Debug, Serialize)]
pub struct SupervisedReport {
    pub seed: u64,
    /// Test accuracy with controller-emitted masks.
    pub mnist_acc: f64,
    pub fashion_acc: f64,
    /// Test accuracy with the stored masks.
    pub mnist_acc_oracle: f64,
    pub fashion_acc_oracle: f64,
    pub active_neurons: BTreeMap<String, usize>,
    pub mask_overlap: usize,
    /// Share of test rows whose emitted mask equals the stored one.
    pub mask_match: BTreeMap<String, f64>,
    pub retention: Option<ForgettingReport>,
    pub sweeps: usize,
    pub error: Option<String>,
}

fn acc_of(evals: &[TaskEvaluation], name: &str) -> f64 {
    evals.iter().find(|e| e.name == name).map_or(f64::NAN, |e| e.accuracy)
}

fn supervised_report(model: &AfmModel, tasks: &[TaskSpec], emit_mode: EmitMode, seed: u64) -> Result<SupervisedReport, CliError> {
    let oracle = evaluate_multitask(model, tasks, MaskSource::Oracle, emit_mode)?;
    let emitted = evaluate_multitask(model, tasks, MaskSource::Controller, emit_mode)?;
    let mut active_neurons: BTreeMap<String, usize> = tasks
        .iter()
        .filter_map(|t| model.masks.get(&t.id).map(|m| (t.name.clone(), m.count_active())))
        .collect();
    active_neurons.insert("total".into(), model.total_active_neurons());
    Ok(SupervisedReport {
        seed,
        mnist_acc: acc_of(&emitted, MNIST),
        fashion_acc: acc_of(&emitted, FASHION),
        mnist_acc_oracle: acc_of(&oracle, MNIST),
        fashion_acc_oracle: acc_of(&oracle, FASHION),
        active_neurons,
        mask_overlap: model.mask_overlap()?,
        mask_match: emitted
            .iter()
            .filter_map(|e| e.mask_match_rate.map(|r| (e.name.clone(), r)))
            .collect(),
        retention: model.retention.clone(),
        sweeps: model.history.len(),
        error: model.error.clone(),
    })
}

pub fn train_supervised(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let mut tasks = both_tasks(cfg)?;
    prepare_out_dir(cfg)?;
    let mut log = MetricsLog::new(format!("train-supervised-{}", cfg.seed));
    let model = train_multitask(&mut tasks, &cfg.supervised, cfg.seed, &mut log)?;
    let report = supervised_report(&model, &tasks, cfg.eval.emit_mode, cfg.seed)?;
    finish(cfg, &log, &checkpoint::supervised_checkpoint(&model)?)?;
    write_report(cfg, &report)
}

#[derive(Debug, Serialize)]
pub struct RlRunReport {
    pub seed: u64,
    /// Environment steps of every phase, in order.
    pub steps_to_threshold: BTreeMap<String, usize>,
    #[serde(flatten)]
    pub report: RlReport,
}

pub fn train_rl(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    prepare_out_dir(cfg)?;
    let mut log = MetricsLog::new(format!("train-rl-{}", cfg.seed));
    let outcome = run_afm_rl(&cfg.rl, cfg.seed, &mut log)?;
    let steps_to_threshold = outcome
        .report
        .phases
        .iter()
        .filter(|p| p.threshold.is_some())
        .map(|p| (p.phase.clone(), p.steps))
        .collect();
    let ckpt = checkpoint::rl_checkpoint(&outcome.net, &outcome.controller, &outcome.masks)?;
    finish(cfg, &log, &ckpt)?;
    write_report(
        cfg,
        &RlRunReport {
            seed: cfg.seed,
            steps_to_threshold,
            report: outcome.report,
        },
    )
}

/// Dense `[input, hidden, classes]` network trained on one task.
fn pretrain_single(cfg: &ExperimentConfig, task: &TaskSpec, log: &mut MetricsLog) -> Result<Network, CliError> {
    let s = &cfg.supervised;
    let mut net = Network::mlp(
        &[task.train.width(), s.hidden_width, NUM_CLASSES],
        &mut rng::stream(cfg.seed, streams::INIT_NET),
    )?;
    let mut opt = OptimizerState::adam(s.learning_rate);
    let mut shuffle = rng::stream(cfg.seed, streams::SHUFFLE);
    for epoch in 0..s.pretrain_epochs {
        let loss = train_classifier_epoch(
            &mut net,
            &mut opt,
            &task.train.images,
            &task.train.labels,
            &[],
            s.batch_size,
            &FrozenTensors::none(),
            &mut shuffle,
        )?;
        log.push("pretrain", epoch as u64, &[("loss", loss)])?;
    }
    Ok(net)
}

fn single_task_checkpoint(net: &Network, mask: &NeuronMask, kind: &str) -> Result<Checkpoint, CliError> {
    let mut c = Checkpoint::new(kind);
    c.push_network("net", net)?;
    c.push_mask_table("masks", &[(TaskId(0), mask.clone())].into())?;
    Ok(c)
}

#[derive(Debug, Serialize)]
pub struct MaskReport {
    pub seed: u64,
    pub task: String,
    pub active_neurons: usize,
    pub dense_acc: f64,
    pub masked_acc: f64,
    pub mask: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sparsify_history: Option<Vec<SparsifyEpoch>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub search_fitness: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generations: Option<usize>,
}

fn mask_report(cfg: &ExperimentConfig, task: &TaskSpec, net: &Network, mask: &NeuronMask) -> Result<MaskReport, CliError> {
    let test = &task.test;
    Ok(MaskReport {
        seed: cfg.seed,
        task: task.name.clone(),
        active_neurons: mask.count_active(),
        dense_acc: accuracy(net, &test.images, &test.labels, &[])?,
        masked_acc: accuracy(net, &test.images, &test.labels, &[Some(mask), None])?,
        mask: mask.to_string(),
        sparsify_history: None,
        search_fitness: None,
        generations: None,
    })
}

pub fn sparsify(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let task = load_task(cfg, &cfg.data.task, TaskId(0))?;
    prepare_out_dir(cfg)?;
    let mut log = MetricsLog::new(format!("sparsify-{}", cfg.seed));
    let net = pretrain_single(cfg, &task, &mut log)?;
    let outcome = train_sparse(
        &task.train,
        &net,
        &cfg.supervised.sparsify,
        None,
        &mut rng::substream(cfg.seed, streams::VD_NOISE, 0),
        &mut rng::substream(cfg.seed, streams::VD_NOISE, 1),
    )?;
    for e in &outcome.history {
        log.push(
            "sparsify",
            e.epoch as u64,
            &[
                ("loss", e.mean_loss),
                ("nll", e.mean_nll),
                ("kl_weight", e.kl_weight),
                ("active_neurons", e.active_neurons as f64),
            ],
        )?;
    }
    let mask = outcome.mask.with_task(TaskId(0));
    let mut report = mask_report(cfg, &task, &net, &mask)?;
    report.sparsify_history = Some(outcome.history);
    finish(cfg, &log, &single_task_checkpoint(&net, &mask, "sparsify")?)?;
    write_report(cfg, &report)
}

pub fn search_mask(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let task = load_task(cfg, &cfg.data.task, TaskId(0))?;
    prepare_out_dir(cfg)?;
    let mut log = MetricsLog::new(format!("search-mask-{}", cfg.seed));
    let net = pretrain_single(cfg, &task, &mut log)?;
    let probe = task.validation.head(cfg.supervised.evo_eval_samples);
    let score = |m: &NeuronMask| accuracy(&net, &probe.images, &probe.labels, &[Some(m), None]);
    let outcome = evolve(
        cfg.supervised.hidden_width,
        &score,
        &[],
        &cfg.supervised.evo,
        &mut rng::stream(cfg.seed, streams::EVO),
    )?;
    for (g, f) in outcome.trace.iter().enumerate() {
        log.push("search", g as u64, &[("best_fitness", *f)])?;
    }
    let mask = outcome.best.with_task(TaskId(0));
    let mut report = mask_report(cfg, &task, &net, &mask)?;
    report.search_fitness = Some(outcome.best_fitness);
    report.generations = Some(outcome.generations_run);
    finish(cfg, &log, &single_task_checkpoint(&net, &mask, "search-mask")?)?;
    write_report(cfg, &report)
}

#[derive(Debug, Serialize)]
pub struct SupervisedEvalReport {
    pub seed: u64,
    pub mask_source: MaskSource,
    pub mnist_acc: f64,
    pub fashion_acc: f64,
    pub active_neurons: BTreeMap<String, usize>,
    pub mask_overlap: usize,
    pub mask_match: BTreeMap<String, f64>,
}

#[derive(Debug, Serialize)]
pub struct RlEvalReport {
    pub seed: u64,
    pub copy_reward: f64,
    pub drop_reward: f64,
    pub copy_probe_reward: f64,
    pub drop_probe_reward: f64,
    pub active_neurons: BTreeMap<String, usize>,
}

/// Which model layout `eval` expects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalModel {
    Auto,
    Supervised,
    Rl,
}

pub fn eval(cfg: &ExperimentConfig, model: EvalModel) -> Result<PathBuf, CliError> {
    let path = cfg
        .eval
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE));
    if !path.exists() {
        return Err(CliError::config(format!("checkpoint not found: {}", path.display())));
    }
    let ckpt = Checkpoint::load(&path)?;
    let model = match model {
        EvalModel::Auto if ckpt.kind == checkpoint::KIND_RL => EvalModel::Rl,
        EvalModel::Auto if ckpt.kind == checkpoint::KIND_SUPERVISED => EvalModel::Supervised,
        EvalModel::Auto => {
            return Err(CliError::config(format!("cannot evaluate a `{}` checkpoint", ckpt.kind)));
        }
        m => m,
    };
    match model {
        EvalModel::Rl => eval_rl(cfg, &ckpt),
        _ => eval_supervised(cfg, &ckpt),
    }
}

fn eval_supervised(cfg: &ExperimentConfig, ckpt: &Checkpoint) -> Result<PathBuf, CliError> {
    let tasks = both_tasks(cfg)?;
    let template = AfmModel::new(tasks[0].train.width(), &cfg.supervised, Vec::new(), cfg.seed)?;
    let model = checkpoint::restore_supervised(ckpt, &template)?;
    prepare_out_dir(cfg)?;
    let evals = evaluate_multitask(&model, &tasks, cfg.eval.mask_source, cfg.eval.emit_mode)?;
    let mut active_neurons: BTreeMap<String, usize> = evals.iter().map(|e| (e.name.clone(), e.active_neurons)).collect();
    active_neurons.insert("total".into(), model.total_active_neurons());
    write_report(
        cfg,
        &SupervisedEvalReport {
            seed: cfg.seed,
            mask_source: cfg.eval.mask_source,
            mnist_acc: acc_of(&evals, MNIST),
            fashion_acc: acc_of(&evals, FASHION),
            active_neurons,
            mask_overlap: model.mask_overlap()?,
            mask_match: evals
                .iter()
                .filter_map(|e| e.mask_match_rate.map(|r| (e.name.clone(), r)))
                .collect(),
        },
    )
}

fn eval_rl(cfg: &ExperimentConfig, ckpt: &Checkpoint) -> Result<PathBuf, CliError> {
    let rl = &cfg.rl;
    let alphabet = rl.alphabet()?;
    let width = alphabet.state_width();
    let mut r = rng::stream(cfg.seed, streams::INIT_NET);
    let q = Network::mlp(&[width, rl.hidden_width, rl.num_actions], &mut r)?;
    let controller = ControllerNet::from_config(width, rl.hidden_width, &rl.controller, &mut r)?;
    let (net, _, masks): (Network, ControllerNet, MaskTable) = checkpoint::restore_rl(ckpt, &q, &controller)?;
    prepare_out_dir(cfg)?;
    let mask_of = |task: TaskId| {
        masks
            .get(&task)
            .cloned()
            .ok_or_else(|| CliError::config(format!("checkpoint has no mask for {task}")))
    };
    let (copy_mask, drop_mask) = (mask_of(COPY_TASK)?, mask_of(DROP_TASK)?);
    let run = |kind, mask: &NeuronMask, inputs: &[Vec<u8>]| evaluate_policy(&net, mask, kind, &alphabet, rl.num_actions, inputs);
    let copy_inputs = evaluation_inputs(EnvKind::Copy, &alphabet, &rl.lengths, rl.eval_trials, cfg.seed, 0);
    let drop_inputs = evaluation_inputs(EnvKind::DropDuplicate, &alphabet, &rl.lengths, rl.eval_trials, cfg.seed, 1);
    let report = RlEvalReport {
        seed: cfg.seed,
        copy_reward: run(EnvKind::Copy, &copy_mask, &copy_inputs)?,
        drop_reward: run(EnvKind::DropDuplicate, &drop_mask, &drop_inputs)?,
        copy_probe_reward: run(EnvKind::Copy, &copy_mask, &[alphabet.encode(COPY_PROBE)?])?,
        drop_probe_reward: run(EnvKind::DropDuplicate, &drop_mask, &[alphabet.encode(DROP_DUPLICATE_PROBE)?])?,
        active_neurons: [
            ("copy".to_string(), copy_mask.count_active()),
            ("drop-duplicate".to_string(), drop_mask.count_active()),
        ]
        .into(),
    };
    write_report(cfg, &report)
}
