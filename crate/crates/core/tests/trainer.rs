mod common;

use ksm_core::baselines::StrategySpec;
use ksm_core::data::{synthetic_tasks, SyntheticSpec, TaskSequence};
use ksm_core::model::{evaluate_logits, BackboneConfig, Head};
use ksm_core::tensor::{OptimizerKind, Param, Tensor};
use ksm_core::trainer::{evaluate, run_sequence, train_finetune, train_initial, train_task, TrainConfig};
use ksm_core::Error;
use rand::Rng;

const DIMS: [usize; 3] = [3, 8, 8];

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig::conv_stack(DIMS, &[8, 16], 32)
}

fn config(strategy: StrategySpec, epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        batch_size: 32,
        optimizer: OptimizerKind::adam(),
        strategy,
        ..TrainConfig::new(tiny_backbone()).with_epochs(epochs)
    }
}

fn tasks(n: usize, separation: f64, seed: u64) -> TaskSequence {
    synthetic_tasks(&SyntheticSpec {
        separation,
        ..SyntheticSpec::new(n, 2, DIMS, seed)
    })
    .unwrap()
}

/// Binomial 3σ band around chance for `n` trials over `classes` classes.
fn within_chance(acc: f64, n: usize, classes: usize) -> bool {
    let p = 1.0 / classes as f64;
    (acc - p).abs() <= 3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

#[test]
fn untrained_backbone_is_at_chance() {
    let seq = tasks(1, 0.0, 1);
    let t = &seq.tasks[0];
    let (backbone, art) = train_initial::<f32>(t, &config(StrategySpec::KSM, 0)).unwrap();
    let e = evaluate(&backbone, &art, &t.test).unwrap();
    assert!(within_chance(e.accuracy, e.total, 2), "accuracy {}", e.accuracy);
}

#[test]
fn separable_task_is_learned() {
    let seq = tasks(1, 1.0, 2);
    let t = &seq.tasks[0];
    let (backbone, art) = train_initial::<f32>(t, &config(StrategySpec::KSM, 20)).unwrap();
    assert!(backbone.is_frozen());
    let e = evaluate(&backbone, &art, &t.test).unwrap();
    assert!(e.accuracy >= 0.95, "accuracy {}", e.accuracy);
}

#[test]
fn evaluation_is_deterministic() {
    let seq = tasks(1, 1.0, 3);
    let t = &seq.tasks[0];
    let (backbone, art) = train_initial::<f32>(t, &config(StrategySpec::KSM, 2)).unwrap();
    let a = evaluate(&backbone, &art, &t.test).unwrap();
    let b = evaluate(&backbone, &art, &t.test).unwrap();
    assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
}

#[test]
fn random_head_is_at_chance() {
    let seq = tasks(1, 0.0, 4);
    let t = &seq.tasks[0];
    let (backbone, mut art) = train_initial::<f32>(t, &config(StrategySpec::KSM, 1)).unwrap();
    let mut rng = common::rng(4);
    let shape = art.head.weight.value.shape().to_vec();
    art.head = Head {
        weight: Param::new(Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))),
        bias: Param::new(Tensor::zeros([2])),
    };
    let e = evaluate(&backbone, &art, &t.test).unwrap();
    assert!(within_chance(e.accuracy, e.total, 2), "accuracy {}", e.accuracy);
}

#[test]
fn mask_training_needs_frozen_backbone() {
    let seq = tasks(2, 1.0, 5);
    let cfg = config(StrategySpec::KSM, 1);
    let (backbone, art) = train_initial::<f32>(&seq.tasks[0], &cfg).unwrap();
    let open = backbone.unfrozen_clone();
    assert!(matches!(
        train_task(&seq.tasks[1], &open, &art.norms, &cfg),
        Err(Error::Contract(_))
    ));
    let mut frozen = backbone.clone();
    assert!(matches!(
        train_finetune(&seq.tasks[1], &mut frozen, &art.norms, &config(StrategySpec::Finetune, 1)),
        Err(Error::Contract(_))
    ));
}

#[test]
fn initial_mask_reproduces_backbone_features() {
    let seq = tasks(1, 1.0, 6);
    let t = &seq.tasks[0];
    let cfg = config(StrategySpec::KSM, 3);
    let (backbone, art1) = train_initial::<f32>(t, &cfg).unwrap();
    for strategy in StrategySpec::ALL.into_iter().filter(|s| !s.is_finetune()) {
        let (mut art, _) = train_task(t, &backbone, &art1.norms, &TrainConfig { strategy, ..cfg.clone().with_epochs(0) }).unwrap();
        assert!(art.masks.iter().all(|m| m.binary().zeros() == 0), "{strategy}");
        art.head = art1.head.clone();
        let (x, _) = t.test.batch::<f32>(&(0..16).collect::<Vec<_>>());
        let a = evaluate_logits(&backbone, &art1, x.clone()).unwrap();
        let b = evaluate_logits(&backbone, &art, x).unwrap();
        assert_eq!(a, b, "{strategy}");
    }
}

#[test]
fn relearning_the_initial_task_keeps_accuracy() {
    let seq = tasks(1, 1.0, 7);
    let t = &seq.tasks[0];
    let cfg = config(StrategySpec::KSM, 5);
    let (backbone, art1) = train_initial::<f32>(t, &cfg).unwrap();
    let hash = backbone.content_hash();
    let base = evaluate(&backbone, &art1, &t.test).unwrap().accuracy;
    let (art, _) = train_task(t, &backbone, &art1.norms, &cfg).unwrap();
    let again = evaluate(&backbone, &art, &t.test).unwrap().accuracy;
    assert!(again >= base - 0.02, "{again} vs {base}");
    assert_eq!(backbone.content_hash(), hash);
    assert!(backbone.conv.iter().all(|p| p.grad.is_none()));
}

#[test]
fn single_task_ledger() {
    let seq = tasks(1, 1.0, 8);
    let out = run_sequence::<f32>(&seq, &config(StrategySpec::KSM, 1)).unwrap();
    assert_eq!(out.ledger.matrix.len(), 1);
    assert_eq!(out.ledger.matrix[0].len(), 1);
}

#[test]
fn two_tasks_learned_without_forgetting() {
    let seq = tasks(2, 1.0, 9);
    let out = run_sequence::<f32>(&seq, &config(StrategySpec::KSM, 10)).unwrap();
    let l = &out.ledger;
    for i in 0..2 {
        assert!(l.matrix[i][i].unwrap() >= 0.9, "task {i}: {:?}", l.matrix);
    }
    assert!(l.no_forgetting());
    assert_eq!(l.matrix[0][1].unwrap().to_bits(), l.matrix[0][0].unwrap().to_bits());
}

#[test]
fn finetuning_forgets() {
    let seq = tasks(3, 1.0, 10);
    let out = run_sequence::<f32>(&seq, &config(StrategySpec::Finetune, 5)).unwrap();
    assert!(!out.ledger.no_forgetting(), "{:?}", out.ledger.matrix);
    assert!(out.finetuned.is_some());
}

#[test]
fn initial_task_is_configurable() {
    let seq = tasks(3, 1.0, 11);
    let cfg = TrainConfig {
        init_task: 3,
        ..config(StrategySpec::KSM, 1)
    };
    let out = run_sequence::<f32>(&seq, &cfg).unwrap();
    assert_eq!(out.ledger.task_ids, vec![3, 1, 2]);
    let bad = TrainConfig { init_task: 9, ..cfg };
    assert!(matches!(run_sequence::<f32>(&seq, &bad), Err(Error::UnknownTask(9))));
}

#[test]
fn runs_are_reproducible() {
    let seq = tasks(3, 1.0, 12);
    let cfg = config(StrategySpec::KSM, 2);
    let a = run_sequence::<f32>(&seq, &cfg).unwrap();
    let b = run_sequence::<f32>(&seq, &cfg).unwrap();
    assert_eq!(a.ledger.matrix, b.ledger.matrix);
    assert_eq!(a.artifacts, b.artifacts);
}

#[test]
fn every_mask_strategy_is_exact_on_old_tasks() {
    let seq = tasks(3, 1.0, 13);
    for strategy in StrategySpec::ALL.into_iter().filter(|s| !s.is_finetune()) {
        let out = run_sequence::<f32>(&seq, &config(strategy, 2)).unwrap();
        assert!(out.ledger.no_forgetting(), "{strategy}: {:?}", out.ledger.matrix);
    }
}
