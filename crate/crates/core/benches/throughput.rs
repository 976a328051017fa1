//! Training throughput with the default rayon pool against a single thread.
//! Build with `--no-default-features` to measure the sequential fallback.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use zapnet_core::data::{make_synthetic, split, SplitSpec, SyntheticSpec};
use zapnet_core::nn::{ConvNet, ModelConfig, Trainable};
use zapnet_core::par::with_threads;

fn pools() -> Vec<(&'static str, Option<usize>)> {
    vec![("pool", None), ("one-thread", Some(1))]
}

fn train_step(c: &mut Criterion) {
    let d = make_synthetic(&SyntheticSpec {
        n_classes: 16,
        n_per_class: 2,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let s = split(&d, &SplitSpec { n_train: 1, n_test: 1, seed: 0 }).unwrap();
    let (x, y) = d.batch(&s.train.samples()).unwrap();
    let mut group = c.benchmark_group("train_step_b16");
    group.sample_size(10);
    for channels in [16, 64] {
        let model = ConvNet::init(ModelConfig::new(channels, (28, 28, 1), 16), 0).unwrap();
        for (name, threads) in pools() {
            group.bench_with_input(BenchmarkId::new(name, channels), &channels, |b, _| {
                with_threads(threads, || {
                    b.iter(|| black_box(model.train_step(&x, &y, Trainable::All).unwrap().loss))
                })
            });
        }
    }
    group.finish();
}

fn eval_forward(c: &mut Criterion) {
    let d = make_synthetic(&SyntheticSpec {
        n_classes: 20,
        n_per_class: 5,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let s = split(&d, &SplitSpec { n_train: 5, n_test: 0, seed: 0 }).unwrap();
    let (x, _) = d.batch(&s.train.samples()).unwrap();
    let model = ConvNet::init(ModelConfig::new(64, (28, 28, 1), 20), 0).unwrap();
    let mut group = c.benchmark_group("logits_b100_c64");
    group.sample_size(10);
    for (name, threads) in pools() {
        group.bench_function(name, |b| {
            with_threads(threads, || b.iter(|| black_box(model.logits(&x).unwrap())))
        });
    }
    group.finish();
}

criterion_group!(benches, train_step, eval_forward);
criterion_main!(benches);
