//! Shared input generators for the benchmark suite.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rfcr_core::geometry::{Point3, PointCloud};

/// Uniform random points in a `side`-length cube with cyclic labels.
pub fn random_cloud(n: usize, side: f64, classes: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions: Vec<Point3> = (0..n)
        .map(|_| {
            [
                rng.gen_range(0.0..side),
                rng.gen_range(0.0..side),
                rng.gen_range(0.0..side),
            ]
        })
        .collect();
    let labels: Vec<i32> = (0..n).map(|i| (i % classes) as i32).collect();
    PointCloud::new(positions, labels).expect("valid cloud")
}

/// Reference quadratic-time radius search used to calibrate the grid.
pub fn brute_force_radius(
    queries: &[Point3],
    support: &[Point3],
    radius: f64,
    cap: usize,
) -> Vec<Vec<u32>> {
    let r2 = radius * radius;
    queries
        .iter()
        .map(|q| {
            let mut hits: Vec<(f64, u32)> = support
                .iter()
                .enumerate()
                .filter_map(|(j, s)| {
                    let d2 = (q[0] - s[0]).powi(2) + (q[1] - s[1]).powi(2) + (q[2] - s[2]).powi(2);
                    (d2 <= r2).then_some((d2, j as u32))
                })
                .collect();
            hits.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            hits.truncate(cap);
            hits.into_iter().map(|(_, j)| j).collect()
        })
        .collect()
}
