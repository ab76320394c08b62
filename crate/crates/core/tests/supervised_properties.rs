mod common;

use afm_core::controller::{ControllerConfig, EmitMode};
use afm_core::data::LabeledDataset;
use afm_core::evo::EvoConfig;
use afm_core::matrix::argmax;
use afm_core::metrics::MetricsLog;
use afm_core::nn::accuracy;
use afm_core::sparsify::SparsifyConfig;
use afm_core::supervised::{
    evaluate_multitask, train_multitask, run_plain_sgd, MaskFinder, MaskSource, SupervisedConfig, TaskSpec, TaskStatus,
};
use afm_core::{NeuronMask, TaskId};
use common::blobs;

const DIM: usize = 20;

fn task(id: u32, name: &str, data_seed: u64) -> TaskSpec {
    let train = blobs(1200, DIM, 10, 0.08, data_seed);
    let test = blobs(400, DIM, 10, 0.08, data_seed);
    TaskSpec::from_train_test(TaskId(id), name, &train, test, 0.1, 5).unwrap()
}

/// Same inputs as `base` with every label shifted by `shift` classes.
fn relabeled(base: &TaskSpec, id: u32, name: &str, shift: usize) -> TaskSpec {
    let shift_set = |d: &LabeledDataset| {
        LabeledDataset::new(d.images.clone(), d.labels.iter().map(|l| (l + shift) % 10).collect(), name).unwrap()
    };
    TaskSpec::new(
        TaskId(id),
        name,
        shift_set(&base.train),
        shift_set(&base.validation),
        shift_set(&base.test),
    )
}

fn small_config(finder: MaskFinder) -> SupervisedConfig {
    SupervisedConfig {
        hidden_width: 32,
        batch_size: 32,
        learning_rate: 0.01,
        pretrain_epochs: 5,
        epochs: 3,
        max_sweeps: 2,
        mask_finder: finder,
        sparsify: SparsifyConfig {
            epochs: 30,
            learning_rate: 0.01,
            ..SparsifyConfig::default()
        },
        evo: EvoConfig {
            population_size: 20,
            generations: 15,
            sparsity_weight: 0.2,
            ..EvoConfig::default()
        },
        evo_eval_samples: 200,
        controller: ControllerConfig {
            hidden: vec![32],
            epochs: 20,
            learning_rate: 0.005,
            ..ControllerConfig::default()
        },
        freeze_head: true,
        ..SupervisedConfig::default()
    }
}

#[test]
fn zero_epochs_flags_an_untrained_model() {
    let mut tasks = vec![task(0, "a", 1), task(1, "b", 2)];
    let cfg = SupervisedConfig {
        epochs: 0,
        ..small_config(MaskFinder::Evolutionary)
    };
    let model = train_multitask(&mut tasks, &cfg, 3, &mut MetricsLog::new("t")).unwrap();
    assert!(model.error.is_some());
    assert!(model.masks.is_empty());
    assert!(tasks.iter().all(|t| t.status == TaskStatus::Untrained));
    let evals = evaluate_multitask(&model, &tasks, MaskSource::Oracle, EmitMode::PerSample).unwrap();
    for e in evals {
        assert!(e.accuracy <= 0.3, "untrained accuracy {}", e.accuracy);
    }
}

#[test]
fn all_masked_network_predicts_the_bias_argmax() {
    let mut tasks = vec![task(0, "a", 1)];
    let cfg = small_config(MaskFinder::Evolutionary);
    let model = train_multitask(&mut tasks, &cfg, 3, &mut MetricsLog::new("t")).unwrap();
    let test = &tasks[0].test;
    let zeros = NeuronMask::zeros(cfg.hidden_width);
    let acc = accuracy(&model.net, &test.images, &test.labels, &[Some(&zeros), None]).unwrap();
    let predicted = argmax(&model.net.layers[1].bias);
    let expected = test.labels.iter().filter(|&&l| l == predicted).count() as f64 / test.len() as f64;
    assert_eq!(acc, expected);
}

fn check_two_task_run(finder: MaskFinder) {
    let first = task(0, "a", 1);
    let second = relabeled(&task(0, "b", 2), 1, "b", 3);
    let mut tasks = vec![first, second];
    let cfg = small_config(finder);
    let mut log = MetricsLog::new("t");
    let model = train_multitask(&mut tasks, &cfg, 7, &mut log).unwrap();
    assert!(model.error.is_none());
    assert_eq!(model.mask_overlap().unwrap(), 0);
    assert!(tasks.iter().all(|t| t.status == TaskStatus::Trained));
    let retention = model.retention.clone().expect("retention measured");
    assert_eq!(retention.max_abs_change, 0.0);
    assert!(retention.exclusive_parameters_unchanged());
    assert!(retention.accuracy_drop <= 0.03, "{retention:?}");
    let oracle = evaluate_multitask(&model, &tasks, MaskSource::Oracle, EmitMode::PerSample).unwrap();
    for e in &oracle {
        assert!(e.accuracy >= 0.9, "{finder:?} oracle {e:?}");
        assert!(e.active_neurons > 0 && e.active_neurons < cfg.hidden_width);
    }
    let emitted = evaluate_multitask(&model, &tasks, MaskSource::Controller, EmitMode::PerSample).unwrap();
    for e in &emitted {
        assert!(e.mask_match_rate.unwrap() >= 0.95, "{finder:?} controller {e:?}");
    }
    assert!(log.records().iter().any(|r| r.phase == "sweep"));
}

#[test]
fn evolutionary_masks_separate_two_tasks() {
    check_two_task_run(MaskFinder::Evolutionary);
}

#[test]
fn variational_masks_separate_two_tasks() {
    check_two_task_run(MaskFinder::Variational);
}

#[test]
fn runs_are_deterministic() {
    let run = || {
        let mut tasks = vec![task(0, "a", 1), relabeled(&task(0, "b", 2), 1, "b", 3)];
        let cfg = SupervisedConfig {
            max_sweeps: 1,
            ..small_config(MaskFinder::Evolutionary)
        };
        train_multitask(&mut tasks, &cfg, 9, &mut MetricsLog::new("t")).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.net, b.net);
    assert_eq!(a.masks, b.masks);
    assert_eq!(a.controller, b.controller);
}

#[test]
fn plain_sgd_forgets_a_conflicting_first_task() {
    let first = task(0, "a", 1);
    let second = relabeled(&first, 1, "b", 1);
    let cfg = SupervisedConfig {
        hidden_width: 32,
        batch_size: 32,
        epochs: 10,
        baseline_learning_rate: 0.1,
        ..SupervisedConfig::default()
    };
    let report = run_plain_sgd(&[first, second], &cfg, 4).unwrap();
    assert!(report.after_task[0][0] >= 0.9, "{report:?}");
    assert!(report.after_task[1][1] >= 0.9, "{report:?}");
    assert!(report.after_task[1][0] <= 0.2, "{report:?}");
}
