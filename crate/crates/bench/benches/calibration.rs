use std::hint::black_box;

use clcp::{clcp_search, conformal_quantile, crc_search, ControlConfig};
use clcp_bench::{step_loss_matrix, uniform_values};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn quantile(c: &mut Criterion) {
    let mut group = c.benchmark_group("conformal_quantile");
    for n in [100, 1_000, 10_000] {
        let values = uniform_values(1, n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &values, |b, v| {
            b.iter(|| conformal_quantile(black_box(v), 1.0, 0.1).unwrap())
        });
    }
    group.finish();
}

fn searches(c: &mut Criterion) {
    let config = ControlConfig::new(0.1, 0.1).unwrap();
    let mut group = c.benchmark_group("search");
    for n in [200, 2_000] {
        let matrix = step_loss_matrix(2, n, 101);
        group.bench_with_input(BenchmarkId::new("clcp", n), &matrix, |b, m| {
            b.iter(|| clcp_search(black_box(m), &config).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("crc", n), &matrix, |b, m| {
            b.iter(|| crc_search(black_box(m), 0.1).unwrap())
        });
    }
    group.finish();
}

fn row_selection(c: &mut Criterion) {
    let pool = step_loss_matrix(3, 720, 101);
    let rows: Vec<usize> = (0..200).map(|i| (i * 7) % 720).collect();
    c.bench_function("select_rows 200 of 720", |b| {
        b.iter(|| pool.select_rows(black_box(&rows)).unwrap())
    });
}

criterion_group!(benches, quantile, searches, row_selection);
criterion_main!(benches);
