//! Compares the rayon data-parallel tensor kernels against the sequential
//! fallback. Both paths are compiled here (the sequential entry points exist
//! unconditionally), so one run shows the speedup side by side.
//!
//! Run with `cargo bench -p plm --bench parallel`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use plm::tensor::{matmul_seq, randn_vec};

#[cfg(feature = "parallel")]
use plm::tensor::matmul_par;

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for &d in &[64usize, 256, 512] {
        let a = randn_vec(d * d, 1.0, 1);
        let b = randn_vec(d * d, 1.0, 2);
        group.bench_with_input(BenchmarkId::new("seq", d), &d, |bench, &d| {
            bench.iter(|| matmul_seq(black_box(&a), black_box(&b), d, d, d))
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("par", d), &d, |bench, &d| {
            bench.iter(|| matmul_par(black_box(&a), black_box(&b), d, d, d))
        });
    }
    group.finish();
}

fn bench_randn(c: &mut Criterion) {
    let mut group = c.benchmark_group("randn");
    for &n in &[1usize << 14, 1 << 18, 1 << 20] {
        // randn_vec dispatches on the `parallel` feature internally; the
        // chunked keying keeps both paths bit-identical.
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            bench.iter(|| randn_vec(black_box(n), 1.0, 7))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_randn);
criterion_main!(benches);
