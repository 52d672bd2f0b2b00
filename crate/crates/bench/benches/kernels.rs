use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ksm_core::baselines::{make_strategy, StrategySpec};
use ksm_core::mask::{freeze_soft_mask, MaskHyperparams};
use ksm_core::model::masked_conv_forward;
use ksm_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("conv2d");
    for &(ch, size) in &[(16usize, 16usize), (32, 16), (64, 8)] {
        let x = random(&mut rng, &[16, ch, size, size]);
        let w = random(&mut rng, &[ch, ch, 3, 3]);
        group.bench_with_input(BenchmarkId::new("forward_backward", format!("{ch}x{size}")), &(), |b, _| {
            b.iter(|| {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let wv = g.leaf(w.clone());
                let y = g.conv2d(xv, wv, 1, 1).unwrap();
                let loss = g.sum(y);
                black_box(g.backward(loss).unwrap());
            })
        });
    }
    group.finish();
}

fn freeze(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let real = random(&mut rng, &[128, 128]);
    let hp = MaskHyperparams::default();
    c.bench_function("freeze_soft_mask/128x128", |b| {
        b.iter(|| black_box(freeze_soft_mask(&real, &hp).unwrap()))
    });
}

/// One masked conv layer, forward and backward, for every mask strategy.
fn masked_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[16, 32, 16, 16]);
    let w = random(&mut rng, &[32, 32, 3, 3]);
    let mut group = c.benchmark_group("masked_conv_step");
    for spec in StrategySpec::ALL.into_iter().filter(|s| !s.is_finetune()) {
        let strategy = make_strategy(spec, MaskHyperparams::default()).unwrap();
        let pipeline = *strategy.pipeline().unwrap();
        let real = random(&mut rng, &pipeline.mask_shape(w.shape()));
        group.bench_function(spec.to_string(), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let wv = g.constant(w.clone());
                let rv = g.leaf(real.clone());
                let m = pipeline.build(&mut g, rv, None).unwrap();
                let y = masked_conv_forward(&mut g, xv, wv, Some(m), 1, 1).unwrap();
                let loss = g.sum(y);
                black_box(g.backward(loss).unwrap());
            })
        });
    }
    group.finish();
}

criterion_group!(benches, conv, freeze, masked_step);
criterion_main!(benches);
