//! Point-cloud container, voxel-grid subsampling, and spatial neighbor queries.
//!
//! Neighbor queries are accelerated by a uniform hash grid keyed by integer
//! voxel coordinates. Results are deterministic: neighbor lists are ordered
//! nearest-first with ties broken by smallest support index.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

/// Sentinel label for unlabeled points.
pub const IGNORE_LABEL: i32 = -1;

pub type Point3 = [f64; 3];

/// Class-space description: class count, names, and the ignore sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSpec {
    pub class_count: usize,
    pub names: Vec<String>,
    pub ignore_value: i32,
}

impl LabelSpec {
    pub fn new(class_count: usize, names: Vec<String>) -> Result<Self> {
        if class_count < 2 {
            return Err(Error::InvalidArgument(format!(
                "class count must be >= 2, got {class_count}"
            )));
        }
        if names.len() != class_count {
            return Err(Error::InvalidArgument(format!(
                "expected {} class names, got {}",
                class_count,
                names.len()
            )));
        }
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != names.len() {
            return Err(Error::InvalidArgument("class names must be distinct".into()));
        }
        Ok(Self { class_count, names, ignore_value: IGNORE_LABEL })
    }

    /// Anonymous spec with names `class0..classN`.
    pub fn anonymous(class_count: usize) -> Result<Self> {
        let names = (0..class_count).map(|c| format!("class{c}")).collect();
        Self::new(class_count, names)
    }
}

/// Positions plus per-point semantic labels (IGNORE_LABEL marks unlabeled points).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Point3>,
    pub labels: Vec<i32>,
}

impl PointCloud {
    pub fn new(positions: Vec<Point3>, labels: Vec<i32>) -> Result<Self> {
        if positions.len() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "positions ({}) and labels ({}) differ in length",
                positions.len(),
                labels.len()
            )));
        }
        for (i, p) in positions.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "non-finite coordinate at point {i}"
                )));
            }
        }
        Ok(Self { positions, labels })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Checks every non-IGNORE label against the class count.
    pub fn validate_labels(&self, spec: &LabelSpec) -> Result<()> {
        for (i, &l) in self.labels.iter().enumerate() {
            if l != spec.ignore_value && (l < 0 || l as usize >= spec.class_count) {
                return Err(Error::InvalidInput(format!(
                    "label {l} at point {i} out of range for {} classes",
                    spec.class_count
                )));
            }
        }
        Ok(())
    }
}

/// Per-query lists of support-point indices, nearest-first.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborLists {
    pub lists: Vec<Vec<u32>>,
    pub support_count: usize,
}

impl NeighborLists {
    pub fn query_count(&self) -> usize {
        self.lists.len()
    }
}

fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn voxel_key(p: &Point3, voxel: f64) -> [i64; 3] {
    [
        (p[0] / voxel).floor() as i64,
        (p[1] / voxel).floor() as i64,
        (p[2] / voxel).floor() as i64,
    ]
}

/// Uniform hash grid over support points with cubic cells.
struct UniformGrid<'a> {
    cell: f64,
    cells: HashMap<[i64; 3], Vec<u32>>,
    support: &'a [Point3],
}

impl<'a> UniformGrid<'a> {
    fn build(support: &'a [Point3], cell: f64) -> Self {
        let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        for (i, p) in support.iter().enumerate() {
            cells.entry(voxel_key(p, cell)).or_default().push(i as u32);
        }
        Self { cell, cells, support }
    }

    /// All support indices within `radius` of `q`, as (dist2, index) pairs, unordered.
    fn radius_candidates(&self, q: &Point3, radius: f64) -> Vec<(f64, u32)> {
        let r2 = radius * radius;
        let reach = (radius / self.cell).ceil() as i64;
        let center = voxel_key(q, self.cell);
        let mut out = Vec::new();
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    let key = [center[0] + dx, center[1] + dy, center[2] + dz];
                    if let Some(idxs) = self.cells.get(&key) {
                        for &i in idxs {
                            let d2 = dist2(q, &self.support[i as usize]);
                            if d2 <= r2 {
                                out.push((d2, i));
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Exact nearest support index, ties to smallest index. Expands shells of
    /// cells until the best found distance beats the next shell's lower bound.
    fn nearest(&self, q: &Point3) -> u32 {
        let center = voxel_key(q, self.cell);
        let mut best: Option<(f64, u32)> = None;
        let mut shell: i64 = 0;
        loop {
            // Minimum possible distance to any cell in shell `shell`.
            let bound = if shell == 0 { 0.0 } else { (shell - 1) as f64 * self.cell };
            if let Some((bd2, _)) = best {
                if bound * bound > bd2 {
                    break;
                }
            }
            let mut any_cell = false;
            for dx in -shell..=shell {
                for dy in -shell..=shell {
                    for dz in -shell..=shell {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != shell {
                            continue;
                        }
                        let key = [center[0] + dx, center[1] + dy, center[2] + dz];
                        if let Some(idxs) = self.cells.get(&key) {
                            any_cell = true;
                            for &i in idxs {
                                let d2 = dist2(q, &self.support[i as usize]);
                                let better = match best {
                                    None => true,
                                    Some((bd2, bi)) => {
                                        d2 < bd2 || (d2 == bd2 && i < bi)
                                    }
                                };
                                if better {
                                    best = Some((d2, i));
                                }
                            }
                        }
                    }
                }
            }
            let _ = any_cell;
            shell += 1;
            // Grid always contains at least one point, so the loop terminates
            // once the shell bound exceeds the best distance found.
            if shell > 1 && best.is_some() {
                let bound = (shell - 1) as f64 * self.cell;
                if bound * bound > best.unwrap().0 {
                    break;
                }
            }
        }
        best.expect("non-empty support").1
    }
}

/// Voxel-grid subsampling: one coarse point per occupied voxel, at the
/// barycenter of its members. Coarse ordering is ascending lexicographic
/// order of integer voxel keys.
pub fn grid_subsample(
    cloud: &PointCloud,
    voxel_size: f64,
) -> Result<(Vec<Point3>, Vec<Vec<u32>>)> {
    if voxel_size <= 0.0 || !voxel_size.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "voxel_size must be positive, got {voxel_size}"
        )));
    }
    if cloud.is_empty() {
        return Err(Error::InvalidArgument("cannot subsample an empty cloud".into()));
    }
    let mut voxels: BTreeMap<[i64; 3], Vec<u32>> = BTreeMap::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        voxels.entry(voxel_key(p, voxel_size)).or_default().push(i as u32);
    }
    let mut coarse = Vec::with_capacity(voxels.len());
    let mut assignment = Vec::with_capacity(voxels.len());
    for members in voxels.into_values() {
        let mut bary = [0.0; 3];
        for &i in &members {
            let p = &cloud.positions[i as usize];
            bary[0] += p[0];
            bary[1] += p[1];
            bary[2] += p[2];
        }
        let n = members.len() as f64;
        coarse.push([bary[0] / n, bary[1] / n, bary[2] / n]);
        assignment.push(members);
    }
    Ok((coarse, assignment))
}

/// Radius search: support indices within `radius` of each query, nearest-first
/// with index tie-break, truncated at `cap`. A query with an empty ball falls
/// back to its single nearest support point.
pub fn radius_neighbors(
    queries: &[Point3],
    support: &[Point3],
    radius: f64,
    cap: usize,
) -> Result<NeighborLists> {
    if support.is_empty() {
        return Err(Error::InvalidArgument("empty support set".into()));
    }
    if radius <= 0.0 || !radius.is_finite() {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {radius}")));
    }
    if cap == 0 {
        return Err(Error::InvalidArgument("cap must be >= 1".into()));
    }
    let grid = UniformGrid::build(support, radius);
    let mut lists = Vec::with_capacity(queries.len());
    for q in queries {
        let mut cand = grid.radius_candidates(q, radius);
        if cand.is_empty() {
            lists.push(vec![grid.nearest(q)]);
            continue;
        }
        cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        cand.truncate(cap);
        lists.push(cand.into_iter().map(|(_, i)| i).collect());
    }
    Ok(NeighborLists { lists, support_count: support.len() })
}

/// Exact 1-NN for every query; ties broken by smallest support index.
pub fn nearest_neighbor(queries: &[Point3], support: &[Point3]) -> Result<Vec<u32>> {
    if support.is_empty() {
        return Err(Error::InvalidArgument("empty support set".into()));
    }
    // Cell size from the support bounding box; degenerate boxes get a unit cell.
    let mut lo = support[0];
    let mut hi = support[0];
    for p in support {
        for d in 0..3 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(hi[2] - lo[2]);
    let cell = if extent > 0.0 {
        (extent / (support.len() as f64).cbrt()).max(extent * 1e-6)
    } else {
        1.0
    };
    let grid = UniformGrid::build(support, cell);
    Ok(queries.iter().map(|q| grid.nearest(q)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, extent: f64, rng: &mut ChaCha8Rng) -> Vec<Point3> {
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(0.0..extent),
                    rng.gen_range(0.0..extent),
                    rng.gen_range(0.0..extent),
                ]
            })
            .collect()
    }

    /// Exhaustive oracle with the same ordering and truncation rule.
    fn brute_radius(
        queries: &[Point3],
        support: &[Point3],
        radius: f64,
        cap: usize,
    ) -> Vec<Vec<u32>> {
        queries
            .iter()
            .map(|q| {
                let mut cand: Vec<(f64, u32)> = support
                    .iter()
                    .enumerate()
                    .map(|(i, s)| (dist2(q, s), i as u32))
                    .filter(|(d2, _)| *d2 <= radius * radius)
                    .collect();
                if cand.is_empty() {
                    let best = support
                        .iter()
                        .enumerate()
                        .map(|(i, s)| (dist2(q, s), i as u32))
                        .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)))
                        .unwrap();
                    return vec![best.1];
                }
                cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                cand.truncate(cap);
                cand.into_iter().map(|(_, i)| i).collect()
            })
            .collect()
    }

    #[test]
    fn subsample_singleton_barycenter() {
        let cloud = PointCloud::new(vec![[0.1, 0.1, 0.1]], vec![0]).unwrap();
        let (coarse, assign) = grid_subsample(&cloud, 1.0).unwrap();
        assert_eq!(coarse, vec![[0.1, 0.1, 0.1]]);
        assert_eq!(assign, vec![vec![0]]);
    }

    #[test]
    fn subsample_two_point_barycenter() {
        let cloud =
            PointCloud::new(vec![[0.0, 0.0, 0.0], [0.2, 0.0, 0.0]], vec![0, 0]).unwrap();
        let (coarse, _) = grid_subsample(&cloud, 1.0).unwrap();
        assert_eq!(coarse.len(), 1);
        assert!((coarse[0][0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn subsample_matches_bucketing_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts = random_points(200, 4.0, &mut rng);
        let labels = vec![0; 200];
        let cloud = PointCloud::new(pts.clone(), labels).unwrap();
        let (coarse, assign) = grid_subsample(&cloud, 1.0).unwrap();

        // Independent exhaustive bucketing.
        let mut buckets: std::collections::HashSet<[i64; 3]> = Default::default();
        for p in &pts {
            buckets.insert(voxel_key(p, 1.0));
        }
        assert_eq!(coarse.len(), buckets.len());

        // Partition property.
        let mut seen = vec![false; pts.len()];
        for members in &assign {
            for &i in members {
                assert!(!seen[i as usize], "point assigned twice");
                seen[i as usize] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn subsample_rejects_bad_args() {
        let cloud = PointCloud::new(vec![[0.0; 3]], vec![0]).unwrap();
        assert!(grid_subsample(&cloud, 0.0).is_err());
        assert!(PointCloud::new(vec![[f64::NAN, 0.0, 0.0]], vec![0]).is_err());
    }

    #[test]
    fn radius_single_candidate() {
        let lists =
            radius_neighbors(&[[0.0; 3]], &[[0.0, 0.0, 0.5]], 1.0, 8).unwrap();
        assert_eq!(lists.lists, vec![vec![0]]);
    }

    #[test]
    fn radius_fallback_to_nearest() {
        let lists = radius_neighbors(&[[0.0; 3]], &[[5.0, 0.0, 0.0]], 1.0, 8).unwrap();
        assert_eq!(lists.lists, vec![vec![0]]);
    }

    #[test]
    fn radius_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts = random_points(300, 3.0, &mut rng);
        let queries = random_points(120, 3.0, &mut rng);
        let lists = radius_neighbors(&queries, &pts, 0.7, 16).unwrap();
        let oracle = brute_radius(&queries, &pts, 0.7, 16);
        assert_eq!(lists.lists, oracle);
    }

    #[test]
    fn radius_rejects_empty_support() {
        assert!(radius_neighbors(&[[0.0; 3]], &[], 1.0, 8).is_err());
    }

    #[test]
    fn nearest_exact_location() {
        let support = vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let idx = nearest_neighbor(&[[4.0, 5.0, 6.0]], &support).unwrap();
        assert_eq!(idx, vec![1]);
    }

    #[test]
    fn nearest_tie_breaks_to_smallest_index() {
        // Query equidistant to indices 2 and 5.
        let support = vec![
            [9.0, 9.0, 9.0],
            [9.0, 9.0, 8.0],
            [1.0, 0.0, 0.0],
            [7.0, 7.0, 7.0],
            [6.0, 6.0, 6.0],
            [-1.0, 0.0, 0.0],
        ];
        let idx = nearest_neighbor(&[[0.0; 3]], &support).unwrap();
        assert_eq!(idx, vec![2]);
    }

    #[test]
    fn nearest_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let support = random_points(100, 2.0, &mut rng);
        let queries = random_points(300, 2.5, &mut rng);
        let got = nearest_neighbor(&queries, &support).unwrap();
        for (q, &g) in queries.iter().zip(&got) {
            let want = support
                .iter()
                .enumerate()
                .map(|(i, s)| (dist2(q, s), i as u32))
                .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)))
                .unwrap()
                .1;
            assert_eq!(g, want);
        }
    }

    #[test]
    fn radius_results_within_radius_except_fallback() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let support = random_points(150, 5.0, &mut rng);
        let queries = random_points(80, 6.0, &mut rng);
        let r = 0.5;
        let lists = radius_neighbors(&queries, &support, r, 8).unwrap();
        for (q, list) in queries.iter().zip(&lists.lists) {
            assert!(!list.is_empty());
            if list.len() > 1 {
                for &i in list {
                    assert!(dist2(q, &support[i as usize]) <= r * r);
                }
            }
        }
    }
}
