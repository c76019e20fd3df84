//! Benchmarks: uniform-grid radius search against the quadratic reference,
//! and OR-pooling throughput on realistic code widths.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rfcr_bench::{brute_force_radius, random_cloud};
use rfcr_core::geometry::{grid_subsample, radius_neighbors, NeighborLists};
use rfcr_core::rfcc::{init_codes, or_pool, BitMatrix};

fn bench_radius_search(c: &mut Criterion) {
    let mut group = c.benchmark_group("radius_search");
    for &n in &[1_000usize, 4_000, 16_000] {
        let cloud = random_cloud(n, 10.0, 8, 42);
        let (centers, _) = grid_subsample(&cloud, 0.5).expect("subsample");
        let radius = 1.25;
        let cap = 26;
        group.bench_with_input(BenchmarkId::new("grid", n), &n, |b, _| {
            b.iter(|| {
                radius_neighbors(&centers, &cloud.positions, radius, cap).expect("search")
            })
        });
        if n <= 4_000 {
            group.bench_with_input(BenchmarkId::new("brute_force", n), &n, |b, _| {
                b.iter(|| brute_force_radius(&centers, &cloud.positions, radius, cap))
            });
        }
    }
    group.finish();
}

fn bench_or_pool(c: &mut Criterion) {
    let mut group = c.benchmark_group("or_pool");
    for &(n, classes) in &[(10_000usize, 8usize), (10_000, 20), (50_000, 13)] {
        let cloud = random_cloud(n, 10.0, classes, 7);
        let codes: BitMatrix = init_codes(&cloud.labels, classes).expect("codes");
        let (centers, _) = grid_subsample(&cloud, 0.5).expect("subsample");
        let neighbors: NeighborLists =
            radius_neighbors(&centers, &cloud.positions, 1.25, 26).expect("search");
        group.bench_with_input(
            BenchmarkId::new("pool", format!("{n}x{classes}")),
            &n,
            |b, _| b.iter(|| or_pool(&codes, &neighbors).expect("pool")),
        );
    }
    group.finish();
}

criterion_group!(benches, bench_radius_search, bench_or_pool);
criterion_main!(benches);
