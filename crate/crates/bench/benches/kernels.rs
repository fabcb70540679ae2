use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use xatl::blocks::retention::default_decays;
use xatl::blocks::{retention_parallel_kernel, retention_recurrent_kernel, ssm_scan_chunked, ssm_scan_sequential};
use xatl::tensor::gemm;
use xatl_bench::{matrices, qkv, scan_inputs, TrainStep};

fn bench_gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm");
    for n in [64, 128, 256] {
        let (a, b) = matrices(n, n, n);
        let mut out = vec![0.0f32; n * n];
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            bench.iter(|| gemm(n, n, n, black_box(&a), false, black_box(&b), false, &mut out, false))
        });
    }
    group.finish();
}

fn bench_retention(c: &mut Criterion) {
    let mut group = c.benchmark_group("retention");
    let decays: Vec<f32> = default_decays(4).iter().map(|&g| g as f32).collect();
    for t in [64, 256] {
        let [q, k, v] = qkv(2, 4, t, 32);
        group.bench_with_input(BenchmarkId::new("parallel", t), &t, |bench, _| {
            bench.iter(|| retention_parallel_kernel(black_box(&q), &k, &v, &decays).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("recurrent", t), &t, |bench, _| {
            bench.iter(|| retention_recurrent_kernel(black_box(&q), &k, &v, &decays).unwrap())
        });
    }
    group.finish();
}

fn bench_scan(c: &mut Criterion) {
    let mut group = c.benchmark_group("selective_scan");
    let inputs = scan_inputs(2, 256, 256, 16);
    group.bench_function("sequential", |bench| bench.iter(|| ssm_scan_sequential(black_box(&inputs)).unwrap()));
    for chunk in [8, 64] {
        group.bench_with_input(BenchmarkId::new("chunked", chunk), &chunk, |bench, &chunk| {
            bench.iter(|| ssm_scan_chunked(black_box(&inputs), chunk).unwrap())
        });
    }
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for preset in ["toy-mha", "toy-retention", "toy-ssm"] {
        let mut fixture = TrainStep::new(preset, 4, 128);
        group.bench_function(preset, |bench| bench.iter(|| fixture.step()));
    }
    group.finish();
}

criterion_group!(benches, bench_gemm, bench_retention, bench_scan, bench_train_step);
criterion_main!(benches);
