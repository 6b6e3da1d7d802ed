//! Parallel vs sequential backends: matrix-product kernels at the shapes
//! the training loop actually hits, and class-parallel feature synthesis.
//! Build with `--no-default-features` to benchmark the sequential build of
//! the graph-level path as well.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use gzsl_core::data::{generate_synthetic_bundle, SyntheticSpec};
use gzsl_core::models::FreeModel;
use gzsl_core::pipeline::{synthesize_unseen, synthesize_unseen_sequential, TrainConfig};
use gzsl_core::rng::{named_rng, randn_tensor};
use gzsl_core::tensor::kernels;
use gzsl_core::{Precision, Tensor};

fn rand_mat(seed: u64, r: usize, c: usize) -> Tensor {
    randn_tensor(&mut named_rng(seed, "bench"), r, c)
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    // (batch x in) * (out x in)^T: critic layer, wide generator layer, square
    for (m, k, n) in [(64, 80, 128), (64, 256, 512), (256, 256, 256)] {
        let a = rand_mat(1, m, k);
        let b = rand_mat(2, n, k);
        group.bench_with_input(
            BenchmarkId::new("sequential", format!("{m}x{k}x{n}")),
            &(&a, &b),
            |bench, (a, b)| bench.iter(|| black_box(kernels::matmul_seq(a, b, false, true))),
        );
        #[cfg(feature = "parallel")]
        group.bench_with_input(
            BenchmarkId::new("parallel", format!("{m}x{k}x{n}")),
            &(&a, &b),
            |bench, (a, b)| bench.iter(|| black_box(kernels::matmul_par(a, b, false, true))),
        );
    }
    group.finish();
}

fn bench_synthesis(c: &mut Criterion) {
    let bundle = generate_synthetic_bundle(&SyntheticSpec::default(), 7);
    let cfg = TrainConfig {
        eg_hidden: 128,
        fr_hidden: 128,
        precision: Precision::F64,
        ..TrainConfig::default()
    };
    let model = FreeModel::init(&cfg.model_config(&bundle), bundle.attributes(), 5).unwrap();

    let mut group = c.benchmark_group("synthesize_unseen");
    group.sample_size(20);
    group.bench_function("sequential", |b| {
        b.iter(|| black_box(synthesize_unseen_sequential(&model, &bundle, 300, 11).unwrap()))
    });
    group.bench_function("default_backend", |b| {
        b.iter(|| black_box(synthesize_unseen(&model, &bundle, 300, 11).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_synthesis);
criterion_main!(benches);
