mod common;

use ksm_core::baselines::{make_strategy, StrategySpec};
use ksm_core::data::{synthetic_tasks, SyntheticSpec};
use ksm_core::mask::{BinaryMask, MaskHyperparams, SoftMask};
use ksm_core::model::{
    evaluate_logits, forward_graph, masked_conv_forward, Backbone, BackboneConfig, ContinualModel, MaskSource,
    TaskState, Trainables,
};
use ksm_core::tensor::{Graph, Tensor};
use ksm_core::trainer::{evaluate, train_initial, TrainConfig};
use ksm_core::Error;
use proptest::prelude::*;
use rand::Rng;

/// Multiplies every kernel of `w` by its mask scalar.
fn scale_weights(w: &Tensor<f64>, mask: &Tensor<f64>) -> Tensor<f64> {
    let area = w.shape()[2] * w.shape()[3];
    Tensor::new(
        w.shape().to_vec(),
        w.data().iter().enumerate().map(|(i, &v)| v * mask.data()[i / area]).collect(),
    )
    .unwrap()
}

fn masked_conv(x: &Tensor<f64>, w: &Tensor<f64>, m: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let (xv, wv, mv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(m.clone()));
    let out = masked_conv_forward(&mut g, xv, wv, Some(mv), stride, pad).unwrap();
    g.value(out).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn kernel_mask_matches_scaled_weights(
        b in 1usize..3, c in 1usize..4, o in 1usize..4, h in 3usize..7, k in 1usize..4,
        stride in 1usize..3, pad in 0usize..2, seed in any::<u64>(),
    ) {
        prop_assume!(h + 2 * pad >= k);
        let mut rng = common::rng(seed);
        let x = common::random_tensor(&mut rng, &[b, c, h, h]);
        let w = common::random_tensor(&mut rng, &[o, c, k, k]);
        let m = Tensor::from_fn([o, c], |_| rng.random_range(0.0..1.0));
        let expected = common::conv2d_oracle(&x, &scale_weights(&w, &m), stride, pad);
        let got = masked_conv(&x, &w, &m, stride, pad);
        prop_assert_eq!(got.shape(), expected.shape());
        for (a, e) in got.data().iter().zip(expected.data()) {
            prop_assert!((a - e).abs() <= 1e-12, "{} vs {}", a, e);
        }
        // an element-wise mask repeating each kernel scalar gives the same output
        let full = Tensor::from_fn(w.shape().to_vec(), |i| m.data()[i / (k * k)]);
        let elem = masked_conv(&x, &w, &full, stride, pad);
        for (a, e) in elem.data().iter().zip(got.data()) {
            prop_assert!((a - e).abs() <= 1e-12);
        }
    }
}

#[test]
fn identity_mask_is_bit_identical() {
    let mut rng = common::rng(1);
    let x = common::random_tensor(&mut rng, &[2, 3, 6, 6]);
    let w = common::random_tensor(&mut rng, &[4, 3, 3, 3]);
    let ones = SoftMask::<f64>::identity([4, 3]).values();
    let masked = masked_conv(&x, &w, &ones, 1, 1);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x), g.constant(w));
    let plain = masked_conv_forward(&mut g, xv, wv, None, 1, 1).unwrap();
    assert_eq!(&masked, g.value(plain));
}

#[test]
fn mismatched_mask_shape_is_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros([3, 2, 3, 3]));
    let m = g.constant(Tensor::zeros([2, 3]));
    assert!(matches!(
        masked_conv_forward(&mut g, x, w, Some(m), 1, 1),
        Err(Error::Dimension { .. })
    ));
}

fn tiny() -> (Backbone<f64>, BackboneConfig) {
    let config = BackboneConfig::conv_stack([2, 6, 6], &[3, 4], 5);
    let mut b = Backbone::init(config.clone(), &mut common::rng(2)).unwrap();
    b.freeze();
    (b, config)
}

#[test]
fn gradients_reach_masks_but_not_backbone() {
    let (backbone, config) = tiny();
    let reference: Vec<_> = config.norm_channels().into_iter().map(ksm_core::model::NormState::new).collect();
    let mut rng = common::rng(3);
    for spec in StrategySpec::ALL.into_iter().filter(|s| !s.is_finetune()) {
        let strategy = make_strategy(spec, MaskHyperparams::default()).unwrap();
        let pipeline = strategy.pipeline().unwrap();
        let state = TaskState::new(2, &backbone, Some(pipeline), &reference, 3, &mut rng).unwrap();
        let x = common::random_tensor(&mut rng, &[4, 2, 6, 6]);
        let mut g = Graph::new();
        let source = MaskSource::Live {
            pipeline,
            real: &state.real_masks,
            rng: None,
        };
        let trainables = Trainables {
            backbone: false,
            norms: true,
            head: true,
        };
        let (logits, vars, _) =
            forward_graph(&mut g, &backbone, source, &state.norms, &state.head, x, true, trainables).unwrap();
        let loss = g.softmax_cross_entropy(logits, &[0, 1, 2, 0]).unwrap();
        let grads = g.backward(loss).unwrap();
        for v in &vars.conv {
            assert!(grads.get(*v).is_none(), "{spec}: conv weight received a gradient");
        }
        for (w, b) in &vars.dense {
            assert!(grads.get(*w).is_none() && grads.get(*b).is_none());
        }
        let mask_grad: f64 = vars.real_masks.iter().map(|v| grads.wrt(&g, *v).max_abs()).sum();
        assert!(mask_grad > 0.0, "{spec}: masks received no gradient");
    }
}

#[test]
fn frozen_masks_change_only_their_task() {
    let seq = synthetic_tasks(&SyntheticSpec::new(1, 2, [3, 8, 8], 4)).unwrap();
    let t = &seq.tasks[0];
    let cfg = TrainConfig {
        lr: 3e-3,
        ..TrainConfig::new(BackboneConfig::preset("tiny", [3, 8, 8]).unwrap()).with_epochs(1)
    };
    let (backbone, art1) = train_initial::<f64>(t, &cfg).unwrap();
    let mut art2 = art1.clone();
    art2.task_id = 2;
    art2.masks = art1
        .masks
        .iter()
        .map(|m| {
            let n: usize = m.shape().iter().product();
            let bits: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
            let zeros = bits.iter().filter(|b| !**b).count();
            SoftMask::from_parts(BinaryMask::new(m.shape().to_vec(), bits).unwrap(), &vec![0.25; zeros]).unwrap()
        })
        .collect();
    let mut model = ContinualModel::new(backbone.clone());
    model.insert(art1.clone());
    let (x, _) = t.test.batch::<f64>(&[0, 1, 2, 3]);
    let before = model.forward_task(x.clone(), 1).unwrap();
    model.insert(art2);
    assert_eq!(model.forward_task(x.clone(), 1).unwrap(), before);
    assert_ne!(model.forward_task(x.clone(), 2).unwrap(), before);
    assert!(matches!(model.forward_task(x, 3), Err(Error::UnknownTask(3))));
    assert_eq!(model.task_ids().collect::<Vec<_>>(), vec![1, 2]);
}

#[test]
fn identity_artifact_equals_raw_backbone() {
    let seq = synthetic_tasks(&SyntheticSpec::new(1, 2, [3, 8, 8], 6)).unwrap();
    let t = &seq.tasks[0];
    let cfg = TrainConfig {
        lr: 3e-3,
        ..TrainConfig::new(BackboneConfig::preset("tiny", [3, 8, 8]).unwrap()).with_epochs(2)
    };
    let (backbone, art) = train_initial::<f32>(t, &cfg).unwrap();
    let reported = evaluate(&backbone, &art, &t.test).unwrap();
    // direct unmasked forward with the same normalization and head
    let idx: Vec<usize> = (0..t.test.len()).collect();
    let (x, y) = t.test.batch::<f32>(&idx);
    let mut g = Graph::new();
    let (logits, _, _) = forward_graph(
        &mut g,
        &backbone,
        MaskSource::None,
        &art.norms,
        &art.head,
        x.clone(),
        false,
        Trainables::default(),
    )
    .unwrap();
    let raw = g.value(logits);
    assert_eq!(raw, &evaluate_logits(&backbone, &art, x).unwrap());
    let correct = raw
        .data()
        .chunks(2)
        .zip(&y)
        .filter(|(row, &l)| (if row[1] > row[0] { 1 } else { 0 }) == l)
        .count();
    assert_eq!(correct, reported.correct);
}
