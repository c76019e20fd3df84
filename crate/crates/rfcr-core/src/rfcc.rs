//! Receptive Field Component Codes: per-level multi-hot class codes built by
//! OR-pooling one-hot input labels through the shared pooling neighborhoods.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::geometry::{NeighborLists, IGNORE_LABEL};
use crate::hierarchy::Hierarchy;

/// Row-major bit matrix; each row is one C-bit code packed into 64-bit words.
#[derive(Debug, Clone, PartialEq)]
pub struct BitMatrix {
    pub rows: usize,
    pub bits: usize,
    words_per_row: usize,
    data: Vec<u64>,
}

impl BitMatrix {
    pub fn zeros(rows: usize, bits: usize) -> Self {
        let words_per_row = bits.div_ceil(64).max(1);
        Self { rows, bits, words_per_row, data: vec![0; rows * words_per_row] }
    }

    #[inline]
    pub fn get(&self, row: usize, bit: usize) -> bool {
        debug_assert!(bit < self.bits);
        let w = self.data[row * self.words_per_row + bit / 64];
        (w >> (bit % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, row: usize, bit: usize) {
        debug_assert!(bit < self.bits);
        self.data[row * self.words_per_row + bit / 64] |= 1u64 << (bit % 64);
    }

    /// ORs row `src` of `other` into row `dst` of `self`.
    pub fn or_row_from(&mut self, dst: usize, other: &Self, src: usize) {
        debug_assert_eq!(self.words_per_row, other.words_per_row);
        let d = dst * self.words_per_row;
        let s = src * other.words_per_row;
        for w in 0..self.words_per_row {
            self.data[d + w] |= other.data[s + w];
        }
    }

    pub fn popcount(&self, row: usize) -> u32 {
        let s = row * self.words_per_row;
        self.data[s..s + self.words_per_row].iter().map(|w| w.count_ones()).sum()
    }

    /// True if row `a` of `self` is a bitwise subset of row `b` of `other`.
    pub fn row_subset_of(&self, a: usize, other: &Self, b: usize) -> bool {
        let sa = a * self.words_per_row;
        let sb = b * other.words_per_row;
        (0..self.words_per_row).all(|w| self.data[sa + w] & !other.data[sb + w] == 0)
    }

    pub fn row_words(&self, row: usize) -> &[u64] {
        let s = row * self.words_per_row;
        &self.data[s..s + self.words_per_row]
    }
}

/// Per-level code matrices; index 0 is the input level.
#[derive(Debug, Clone, PartialEq)]
pub struct RfccStack {
    pub class_count: usize,
    pub levels: Vec<BitMatrix>,
}

/// Level-0 codes: one-hot of each point's label, all-zero for IGNORE.
pub fn init_codes(labels: &[i32], class_count: usize) -> Result<BitMatrix> {
    let mut codes = BitMatrix::zeros(labels.len(), class_count);
    for (i, &l) in labels.iter().enumerate() {
        if l == IGNORE_LABEL {
            continue;
        }
        if l < 0 || l as usize >= class_count {
            return Err(Error::InvalidInput(format!(
                "label {l} at point {i} out of range for {class_count} classes"
            )));
        }
        codes.set(i, l as usize);
    }
    Ok(codes)
}

/// Bitwise OR over each query's neighbor codes in the previous level.
pub fn or_pool(prev_codes: &BitMatrix, neighbors: &NeighborLists) -> Result<BitMatrix> {
    if prev_codes.rows != neighbors.support_count {
        return Err(Error::InvalidArgument(format!(
            "code count {} does not match neighbor support count {}",
            prev_codes.rows, neighbors.support_count
        )));
    }
    let mut out = BitMatrix::zeros(neighbors.lists.len(), prev_codes.bits);
    for (i, list) in neighbors.lists.iter().enumerate() {
        for &j in list {
            out.or_row_from(i, prev_codes, j as usize);
        }
    }
    Ok(out)
}

/// Full multi-hot target stack: one-hot at the input level, then iterated
/// OR-pooling up to the center-most level.
pub fn gen_targets(h: &Hierarchy, labels: &[i32], class_count: usize) -> Result<RfccStack> {
    if labels.len() != h.point_count(0) {
        return Err(Error::InvalidArgument(format!(
            "label count {} does not match level-0 point count {}",
            labels.len(),
            h.point_count(0)
        )));
    }
    let mut levels = vec![init_codes(labels, class_count)?];
    for l in 1..h.level_count() {
        let pool = h.levels[l]
            .pool_neighbors
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("level {l} missing pool neighbors")))?;
        let next = or_pool(&levels[l - 1], pool)?;
        levels.push(next);
    }
    Ok(RfccStack { class_count, levels })
}

/// One-hot ablation variant: each code is the one-hot of the most frequent
/// non-IGNORE label within the receptive field, ties to the smallest class,
/// all-zero when the field holds no labeled point.
pub fn majority_code(h: &Hierarchy, labels: &[i32], class_count: usize) -> Result<RfccStack> {
    if labels.len() != h.point_count(0) {
        return Err(Error::InvalidArgument("label count mismatch".into()));
    }
    let mut levels = vec![init_codes(labels, class_count)?];
    // Receptive-field membership tracked as per-point index bitsets over the
    // input level, OR-pooled in lockstep with the hierarchy.
    let n0 = h.point_count(0);
    let mut fields = BitMatrix::zeros(n0, n0);
    for i in 0..n0 {
        fields.set(i, i);
    }
    for l in 1..h.level_count() {
        let pool = h.levels[l].pool_neighbors.as_ref().unwrap();
        let next_fields = or_pool(&fields, pool)?;
        let mut codes = BitMatrix::zeros(next_fields.rows, class_count);
        for i in 0..next_fields.rows {
            let mut counts = vec![0u32; class_count];
            for (w, &word) in next_fields.row_words(i).iter().enumerate() {
                let mut bits = word;
                while bits != 0 {
                    let b = bits.trailing_zeros() as usize;
                    bits &= bits - 1;
                    let p = w * 64 + b;
                    let lab = labels[p];
                    if lab != IGNORE_LABEL {
                        counts[lab as usize] += 1;
                    }
                }
            }
            let best = counts
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .unwrap();
            if *best.1 > 0 {
                codes.set(i, best.0);
            }
        }
        levels.push(codes);
        fields = next_fields;
    }
    Ok(RfccStack { class_count, levels })
}

const RFCC_MAGIC: &[u8; 8] = b"RFCRRFCC";
const RFCC_VERSION: u32 = 1;

impl RfccStack {
    /// Binary container: magic, version, class count, level count, then each
    /// level's row count and packed little-endian words.
    pub fn dump(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(RFCC_MAGIC)?;
        w.write_all(&RFCC_VERSION.to_le_bytes())?;
        w.write_all(&(self.class_count as u32).to_le_bytes())?;
        w.write_all(&(self.levels.len() as u32).to_le_bytes())?;
        for m in &self.levels {
            w.write_all(&(m.rows as u64).to_le_bytes())?;
            for row in 0..m.rows {
                for &word in m.row_words(row) {
                    w.write_all(&word.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn load(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != RFCC_MAGIC {
            return Err(Error::Format("bad rfcc magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != RFCC_VERSION {
            return Err(Error::Format(format!("unsupported rfcc version {version}")));
        }
        r.read_exact(&mut b4)?;
        let class_count = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let level_count = u32::from_le_bytes(b4) as usize;
        let mut levels = Vec::with_capacity(level_count);
        for _ in 0..level_count {
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b8)?;
            let rows = u64::from_le_bytes(b8) as usize;
            let mut m = BitMatrix::zeros(rows, class_count);
            let wpr = m.words_per_row;
            for row in 0..rows {
                for w in 0..wpr {
                    r.read_exact(&mut b8)?;
                    m.data[row * wpr + w] = u64::from_le_bytes(b8);
                }
            }
            levels.push(m);
        }
        Ok(Self { class_count, levels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PointCloud;
    use crate::hierarchy::{build_hierarchy, HierarchyConfig};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_scene(n: usize, classes: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positions = (0..n)
            .map(|_| {
                [
                    rng.gen_range(0.0..3.0),
                    rng.gen_range(0.0..3.0),
                    rng.gen_range(0.0..3.0),
                ]
            })
            .collect();
        let labels = (0..n)
            .map(|_| {
                if rng.gen_bool(0.1) {
                    IGNORE_LABEL
                } else {
                    rng.gen_range(0..classes as i32)
                }
            })
            .collect();
        PointCloud::new(positions, labels).unwrap()
    }

    #[test]
    fn init_one_hot() {
        let codes = init_codes(&[3], 5).unwrap();
        for k in 0..5 {
            assert_eq!(codes.get(0, k), k == 3);
        }
    }

    #[test]
    fn init_ignore_is_zero() {
        let codes = init_codes(&[IGNORE_LABEL], 5).unwrap();
        assert_eq!(codes.popcount(0), 0);
    }

    #[test]
    fn init_rejects_out_of_range() {
        assert!(init_codes(&[5], 5).is_err());
    }

    #[test]
    fn init_matches_per_point_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let labels: Vec<i32> = (0..100)
            .map(|_| if rng.gen_bool(0.2) { IGNORE_LABEL } else { rng.gen_range(0..7) })
            .collect();
        let codes = init_codes(&labels, 7).unwrap();
        for (i, &l) in labels.iter().enumerate() {
            for k in 0..7 {
                assert_eq!(codes.get(i, k), l == k as i32);
            }
        }
    }

    #[test]
    fn or_pool_singleton_is_copy() {
        let prev = init_codes(&[2, 4], 5).unwrap();
        let n = NeighborLists { lists: vec![vec![1]], support_count: 2 };
        let out = or_pool(&prev, &n).unwrap();
        assert!(out.get(0, 4));
        assert_eq!(out.popcount(0), 1);
    }

    #[test]
    fn or_pool_two_bit_union() {
        let prev = init_codes(&[2, 0], 5).unwrap();
        let n = NeighborLists { lists: vec![vec![0, 1]], support_count: 2 };
        let out = or_pool(&prev, &n).unwrap();
        assert!(out.get(0, 0) && out.get(0, 2));
        assert_eq!(out.popcount(0), 2);
    }

    #[test]
    fn or_pool_rejects_mismatch() {
        let prev = init_codes(&[0], 3).unwrap();
        let n = NeighborLists { lists: vec![vec![0]], support_count: 2 };
        assert!(or_pool(&prev, &n).is_err());
    }

    #[test]
    fn single_class_scene_is_closed_under_or() {
        let cloud = random_scene(200, 1, 4);
        let labels: Vec<i32> = vec![1; 200];
        let cloud = PointCloud::new(cloud.positions, labels).unwrap();
        let h = build_hierarchy(&cloud, &HierarchyConfig::default()).unwrap();
        let stack = gen_targets(&h, &cloud.labels, 4).unwrap();
        for (l, codes) in stack.levels.iter().enumerate() {
            for i in 0..codes.rows {
                assert!(codes.get(i, 1), "level {l} point {i}");
                assert_eq!(codes.popcount(i), 1);
            }
        }
    }

    #[test]
    fn all_ignore_scene_is_all_zero() {
        let base = random_scene(150, 3, 6);
        let cloud =
            PointCloud::new(base.positions, vec![IGNORE_LABEL; 150]).unwrap();
        let h = build_hierarchy(&cloud, &HierarchyConfig::default()).unwrap();
        let stack = gen_targets(&h, &cloud.labels, 4).unwrap();
        for codes in &stack.levels {
            for i in 0..codes.rows {
                assert_eq!(codes.popcount(i), 0);
            }
        }
    }

    #[test]
    fn codes_match_receptive_field_oracle() {
        let cloud = random_scene(300, 5, 8);
        let cfg = HierarchyConfig { levels: 4, ..Default::default() };
        let h = build_hierarchy(&cloud, &cfg).unwrap();
        let stack = gen_targets(&h, &cloud.labels, 5).unwrap();
        for l in 1..h.level_count() {
            let fields = h.receptive_fields_at(l).unwrap();
            for (i, field) in fields.iter().enumerate() {
                for k in 0..5 {
                    let expect =
                        field.iter().any(|&p| cloud.labels[p as usize] == k as i32);
                    assert_eq!(stack.levels[l].get(i, k), expect, "l={l} i={i} k={k}");
                }
            }
        }
    }

    #[test]
    fn separated_classes_merge_only_at_top() {
        // Two tight clusters 20 m apart; level-1 receptive fields cannot span
        // both, the top level sees everything once it coarsens enough.
        let mut positions = Vec::new();
        let mut labels = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            positions.push([
                rng.gen_range(0.0..0.5),
                rng.gen_range(0.0..0.5),
                rng.gen_range(0.0..0.5),
            ]);
            labels.push(0);
        }
        for _ in 0..100 {
            positions.push([
                20.0 + rng.gen_range(0.0..0.5),
                rng.gen_range(0.0..0.5),
                rng.gen_range(0.0..0.5),
            ]);
            labels.push(1);
        }
        let cloud = PointCloud::new(positions, labels).unwrap();
        let cfg = HierarchyConfig { levels: 3, base_voxel: 0.25, ..Default::default() };
        let h = build_hierarchy(&cloud, &cfg).unwrap();
        let stack = gen_targets(&h, &cloud.labels, 2).unwrap();
        // Level 1 codes are single-bit (clusters are isolated).
        for i in 0..stack.levels[1].rows {
            assert_eq!(stack.levels[1].popcount(i), 1);
        }
        // Union over the top level covers both classes.
        let top = h.level_count() - 1;
        let mut union = [false; 2];
        for i in 0..stack.levels[top].rows {
            for (k, u) in union.iter_mut().enumerate() {
                *u |= stack.levels[top].get(i, k);
            }
        }
        assert!(union[0] && union[1]);
    }

    #[test]
    fn monotone_popcount_along_pool_edges() {
        let cloud = random_scene(250, 4, 12);
        let h = build_hierarchy(&cloud, &HierarchyConfig::default()).unwrap();
        let stack = gen_targets(&h, &cloud.labels, 4).unwrap();
        for l in 1..h.level_count() {
            let pool = h.levels[l].pool_neighbors.as_ref().unwrap();
            for (i, list) in pool.lists.iter().enumerate() {
                for &j in list {
                    assert!(
                        stack.levels[l - 1].row_subset_of(j as usize, &stack.levels[l], i)
                    );
                    assert!(
                        stack.levels[l].popcount(i)
                            >= stack.levels[l - 1].popcount(j as usize)
                    );
                }
            }
        }
    }

    #[test]
    fn or_pool_self_neighborhood_is_identity() {
        let codes = init_codes(&[0, 1, 2, IGNORE_LABEL], 3).unwrap();
        let n = NeighborLists {
            lists: (0..4u32).map(|i| vec![i]).collect(),
            support_count: 4,
        };
        let out = or_pool(&codes, &n).unwrap();
        assert_eq!(out, codes);
    }

    #[test]
    fn majority_matches_counting_oracle() {
        let cloud = random_scene(200, 4, 14);
        let cfg = HierarchyConfig { levels: 4, ..Default::default() };
        let h = build_hierarchy(&cloud, &cfg).unwrap();
        let stack = majority_code(&h, &cloud.labels, 4).unwrap();
        for l in 1..h.level_count() {
            let fields = h.receptive_fields_at(l).unwrap();
            for (i, field) in fields.iter().enumerate() {
                let mut counts = [0u32; 4];
                for &p in field {
                    let lab = cloud.labels[p as usize];
                    if lab != IGNORE_LABEL {
                        counts[lab as usize] += 1;
                    }
                }
                let max = *counts.iter().max().unwrap();
                if max == 0 {
                    assert_eq!(stack.levels[l].popcount(i), 0);
                } else {
                    let want = counts.iter().position(|&c| c == max).unwrap();
                    assert_eq!(stack.levels[l].popcount(i), 1);
                    assert!(stack.levels[l].get(i, want), "l={l} i={i}");
                }
            }
        }
    }

    #[test]
    fn majority_tie_breaks_to_smallest_class() {
        // Two points, classes 2 then 1, pooled into one query.
        let prev_labels = [2, 1];
        let positions = vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]];
        let cloud = PointCloud::new(positions, prev_labels.to_vec()).unwrap();
        let cfg = HierarchyConfig { levels: 2, base_voxel: 1.0, ..Default::default() };
        let h = build_hierarchy(&cloud, &cfg).unwrap();
        let stack = majority_code(&h, &cloud.labels, 3).unwrap();
        assert_eq!(stack.levels[1].rows, 1);
        assert!(stack.levels[1].get(0, 1));
    }

    #[test]
    fn majority_is_subset_of_multi_hot() {
        let cloud = random_scene(220, 5, 16);
        let h = build_hierarchy(&cloud, &HierarchyConfig::default()).unwrap();
        let multi = gen_targets(&h, &cloud.labels, 5).unwrap();
        let one = majority_code(&h, &cloud.labels, 5).unwrap();
        for l in 0..h.level_count() {
            for i in 0..multi.levels[l].rows {
                assert!(one.levels[l].row_subset_of(i, &multi.levels[l], i));
            }
        }
    }

    #[test]
    fn stack_dump_load_round_trip() {
        let cloud = random_scene(180, 6, 18);
        let h = build_hierarchy(&cloud, &HierarchyConfig::default()).unwrap();
        let stack = gen_targets(&h, &cloud.labels, 6).unwrap();
        let mut buf = Vec::new();
        stack.dump(&mut buf).unwrap();
        let loaded = RfccStack::load(&mut buf.as_slice()).unwrap();
        assert_eq!(stack, loaded);
    }
}
