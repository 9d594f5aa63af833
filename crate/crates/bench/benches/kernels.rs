use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use csformer::ops::conv2d;
use csformer::params::{Ctx, ParamStore};
use csformer::sampling::SamplingOperator;
use csformer::transformer::AttentionParams;
use csformer::{AttentionProjection, Mode, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("conv3x3");
    for (res, width) in [(8, 128), (16, 64), (32, 32), (64, 16)] {
        let x = Tensor::randn(&[1, res, res, width], 1.0, &mut rng);
        let w = Tensor::randn(&[width, 3, 3, width], 0.1, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{res}x{res}x{width}")), &(x, w), |b, (x, w)| {
            b.iter(|| conv2d(black_box(x), black_box(w), 1, 1, None).unwrap())
        });
    }
    group.finish();
}

fn bench_sampling(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let patches = Tensor::rand_uniform(&[16, 64, 64, 1], 0.0, 1.0, &mut rng);
    let mut group = c.benchmark_group("sampling");
    for ratio in [0.01, 0.10, 0.50] {
        let op = SamplingOperator::random(ratio, 16, &mut rng).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(ratio), &op, |b, op| {
            b.iter(|| op.sample_patch(black_box(&patches)).unwrap())
        });
    }
    group.finish();
}

fn bench_attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut group = c.benchmark_group("window_attention");
    for (windows, width) in [(1, 256), (4, 128), (16, 64), (64, 32)] {
        let mut store = ParamStore::new();
        let heads = (width / 32).max(1);
        let att =
            AttentionParams::register(&mut store, "a", width, heads, 8, AttentionProjection::Full, &mut rng).unwrap();
        let x = Tensor::randn(&[windows, 64, width], 1.0, &mut rng);
        group.bench_function(BenchmarkId::from_parameter(format!("{windows}x64x{width}")), |b| {
            b.iter(|| {
                let tape = Tape::new();
                let ctx = Ctx::new(&tape, &store, Mode::Eval, false);
                att.forward(&ctx, tape.constant(x.clone())).unwrap().value()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_conv, bench_sampling, bench_attention);
criterion_main!(benches);
