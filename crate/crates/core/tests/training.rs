//! Training harness behavior through the public API: checkpoint round
//! trips, stage wiring, determinism, and optimization progress on small
//! synthetic tasks.

mod common;

use std::collections::BTreeMap;

use sliceseg::augment::AugmentConfig;
use sliceseg::checkpoint::{load_checkpoint, restore_network, write_checkpoint};
use sliceseg::network::{build_network, Mode, NetworkConfig};
use sliceseg::trainer::{
    evaluate, finetune_igtv, pretrain_gtv, train_scratch, EarlyStopPolicy, LrSchedule,
    OptimConfig,
};

fn small_cfg(mode: Mode) -> NetworkConfig {
    NetworkConfig {
        mode,
        stack_depth: if mode == Mode::TwoD { 1 } else { 3 },
        base_width: 4,
        depth: 2,
        ..NetworkConfig::default()
    }
}

fn quick_optim(epochs: usize, lr: f64) -> OptimConfig {
    OptimConfig {
        lr,
        batch_size: 4,
        max_epochs: epochs,
        schedule: LrSchedule::Constant,
        weight_decay: 0.0,
        ..OptimConfig::default()
    }
}

#[test]
fn saved_checkpoint_restores_identical_predictions() {
    let samples = common::square_samples(12, 2);
    let outcome = train_scratch(
        &small_cfg(Mode::TwoD),
        &samples,
        &[],
        &quick_optim(3, 1e-2),
        None,
        None,
        41,
    )
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    write_checkpoint(&path, &outcome.checkpoint).unwrap();
    let loaded = load_checkpoint(&path).unwrap();

    let net_a = restore_network(&outcome.checkpoint).unwrap();
    let net_b = restore_network(&loaded).unwrap();
    let spacing = BTreeMap::new();
    let eval_a = evaluate(&net_a, &samples, &spacing, 0.5, 4).unwrap();
    let eval_b = evaluate(&net_b, &samples, &spacing, 0.5, 4).unwrap();
    // Bit-identical weights must give bit-identical metrics.
    assert_eq!(eval_a.per_slice.mean_dice, eval_b.per_slice.mean_dice);
    assert_eq!(eval_a.per_slice.mean_iou, eval_b.per_slice.mean_iou);
    for (ra, rb) in eval_a.records.iter().zip(eval_b.records.iter()) {
        assert_eq!(ra.dice, rb.dice);
        assert_eq!(ra.hd95, rb.hd95);
    }
}

#[test]
fn finetune_consumes_a_pretrain_checkpoint_file() {
    // Stage 1 on disk, stage 2 from the reloaded file: the full two-stage
    // handoff including inflation.
    let gtv = common::square_samples(12, 2);
    let mut net2d = build_network(&small_cfg(Mode::TwoD), 7).unwrap();
    let pre = pretrain_gtv(&mut net2d, &gtv, &[], &quick_optim(2, 1e-2), None, 7).unwrap();
    assert_eq!(pre.report.stage, "pretrain");
    assert_eq!(pre.checkpoint.meta.stage, "pretrain");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stage1.ckpt");
    write_checkpoint(&path, &pre.checkpoint).unwrap();
    let reloaded = load_checkpoint(&path).unwrap();

    let igtv = common::square_samples(16, 6);
    let (train, val) = igtv.split_at(12);
    let out = finetune_igtv(
        &reloaded,
        &small_cfg(Mode::TwoPointFiveD),
        train,
        val,
        &quick_optim(3, 1e-2),
        &EarlyStopPolicy::default(),
        None,
        8,
    )
    .unwrap();
    assert_eq!(out.report.stage, "finetune");
    assert_eq!(out.checkpoint.meta.stage, "finetune");
    assert!(out.checkpoint.meta.best_val_iou.is_some());
    assert_eq!(out.report.epochs.len(), 3);
}

#[test]
fn training_reduces_the_loss() {
    let samples = common::square_samples(24, 6);
    let outcome = train_scratch(
        &small_cfg(Mode::TwoPointFiveD),
        &samples,
        &[],
        &quick_optim(8, 1e-2),
        None,
        None,
        3,
    )
    .unwrap();
    let first = outcome.report.epochs.first().unwrap().train_loss;
    let last = outcome.report.epochs.last().unwrap().train_loss;
    assert!(
        last < 0.8 * first,
        "loss should fall substantially: first {first}, last {last}"
    );
}

#[test]
fn zero_lr_zero_decay_training_leaves_parameters_untouched() {
    let samples = common::square_samples(8, 2);
    let cfg = small_cfg(Mode::TwoD);
    let optim = OptimConfig {
        lr: 0.0,
        lr_min: 0.0,
        weight_decay: 0.0,
        batch_size: 4,
        max_epochs: 2,
        schedule: LrSchedule::Constant,
        ..OptimConfig::default()
    };
    let outcome = train_scratch(&cfg, &samples, &[], &optim, None, None, 99).unwrap();
    let mut trained = restore_network(&outcome.checkpoint).unwrap();
    let mut fresh = build_network(&cfg, 99).unwrap();
    // Weight values must be bitwise what initialization produced; only the
    // normalization running statistics may move.
    assert_eq!(trained.param_map(), fresh.param_map());
}

#[test]
fn early_stopping_fires_after_patience_epochs_without_improvement() {
    let samples = common::square_samples(16, 6);
    let (train, val) = samples.split_at(12);
    // lr 0 freezes the model, so validation IoU improves once (from None)
    // and then plateaus forever.
    let optim = OptimConfig {
        lr: 0.0,
        lr_min: 0.0,
        weight_decay: 0.0,
        batch_size: 4,
        max_epochs: 30,
        schedule: LrSchedule::Constant,
        ..OptimConfig::default()
    };
    let outcome = train_scratch(
        &small_cfg(Mode::TwoPointFiveD),
        train,
        val,
        &optim,
        Some(&EarlyStopPolicy { patience: 2 }),
        None,
        5,
    )
    .unwrap();
    // lr 0 freezes the weights but not the normalization statistics, so
    // validation IoU may shift for an epoch or two before flatlining; the
    // stop must then fire after exactly `patience` flat epochs.
    assert!(outcome.report.stopped_early);
    let n = outcome.report.epochs.len();
    assert!(n < 30, "should stop well before the epoch budget, ran {n}");
    let best_before_plateau = outcome.report.epochs[n - 3].best_val_iou;
    assert!(best_before_plateau.is_some());
    for e in &outcome.report.epochs[n - 2..] {
        assert_eq!(e.best_val_iou, best_before_plateau);
    }
}

#[test]
fn augmented_training_is_reproducible() {
    let samples = common::square_samples(16, 6);
    let (train, val) = samples.split_at(12);
    let aug = AugmentConfig { seed: 11, ..AugmentConfig::default() };
    let run = || {
        train_scratch(
            &small_cfg(Mode::TwoPointFiveD),
            train,
            val,
            &quick_optim(3, 1e-2),
            None,
            Some(&aug),
            21,
        )
        .unwrap()
    };
    let a = run();
    let b = run();
    let mut net_a = restore_network(&a.checkpoint).unwrap();
    let mut net_b = restore_network(&b.checkpoint).unwrap();
    assert_eq!(net_a.param_map(), net_b.param_map());
    assert_eq!(net_a.buffer_map(), net_b.buffer_map());
    let la: Vec<f64> = a.report.epochs.iter().map(|e| e.train_loss).collect();
    let lb: Vec<f64> = b.report.epochs.iter().map(|e| e.train_loss).collect();
    assert_eq!(la, lb);
}

#[test]
fn phantom_training_task_is_learnable_end_to_end() {
    // A miniature version of the real pipeline: phantom cohort in memory,
    // GTV pretrain, inflate, IGTV finetune, evaluate on a held-out patient.
    let studies = common::processed_cohort(4, 31);
    let (train_studies, test_studies) = studies.split_at(3);

    let gtv_train =
        sliceseg::data::samples::build_samples(train_studies, sliceseg::data::TargetKind::Gtv, 1)
            .unwrap();
    let mut net2d = build_network(&small_cfg(Mode::TwoD), 55).unwrap();
    let pre = pretrain_gtv(&mut net2d, &gtv_train, &[], &quick_optim(2, 3e-3), None, 55).unwrap();

    let igtv_train =
        sliceseg::data::samples::build_samples(train_studies, sliceseg::data::TargetKind::Igtv, 3)
            .unwrap();
    let igtv_test =
        sliceseg::data::samples::build_samples(test_studies, sliceseg::data::TargetKind::Igtv, 3)
            .unwrap();
    let out = finetune_igtv(
        &pre.checkpoint,
        &small_cfg(Mode::TwoPointFiveD),
        &igtv_train,
        &[],
        &quick_optim(2, 1e-3),
        &EarlyStopPolicy::default(),
        None,
        56,
    )
    .unwrap();

    let net = restore_network(&out.checkpoint).unwrap();
    let spacing = common::spacing_map(&studies);
    let eval = evaluate(&net, &igtv_test, &spacing, 0.5, 4).unwrap();
    // Two quick epochs will not segment well; the claim is only that the
    // whole path runs and produces sane numbers.
    assert!(eval.per_slice.mean_dice.is_finite());
    assert!((0.0..=1.0).contains(&eval.per_slice.mean_dice));
    assert_eq!(eval.records.len(), igtv_test.len());
}
