//! Multi-level sampling hierarchy with shared neighbor relations.
//!
//! The same pooling neighbor lists drive both feature encoding and target
//! code generation, so targets describe exactly what the features can see.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::geometry::{
    grid_subsample, nearest_neighbor, radius_neighbors, NeighborLists, Point3, PointCloud,
};

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyConfig {
    /// Requested level count, including the input level.
    pub levels: usize,
    /// Voxel size for level 2; level l uses `base_voxel * ratio^(l-2)`.
    pub base_voxel: f64,
    pub voxel_ratio: f64,
    /// Pooling radius = `radius_factor * voxel` at each level.
    pub radius_factor: f64,
    pub neighbor_cap: usize,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self {
            levels: 5,
            base_voxel: 0.2,
            voxel_ratio: 2.0,
            radius_factor: 2.5,
            neighbor_cap: 26,
        }
    }
}

impl HierarchyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::InvalidArgument("hierarchy needs at least 2 levels".into()));
        }
        if self.base_voxel <= 0.0 {
            return Err(Error::InvalidArgument("base_voxel must be positive".into()));
        }
        if self.voxel_ratio <= 1.0 {
            return Err(Error::InvalidArgument("voxel_ratio must be > 1".into()));
        }
        if self.radius_factor < 1.0 {
            return Err(Error::InvalidArgument("radius_factor must be >= 1".into()));
        }
        if self.neighbor_cap == 0 {
            return Err(Error::InvalidArgument("neighbor_cap must be >= 1".into()));
        }
        Ok(())
    }
}

/// One level of the hierarchy. Level index 0 is the input cloud and carries
/// no pooling relation.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyLevel {
    pub positions: Vec<Point3>,
    /// Queries are this level's points, support is the previous level.
    pub pool_neighbors: Option<NeighborLists>,
    /// For each previous-level point, the index of its nearest point here.
    pub upsample_map: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    pub levels: Vec<HierarchyLevel>,
}

impl Hierarchy {
    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn point_count(&self, level: usize) -> usize {
        self.levels[level].positions.len()
    }

    /// Drops levels above `level_count`, keeping at least two.
    pub fn truncate(&mut self, level_count: usize) {
        assert!(level_count >= 2);
        self.levels.truncate(level_count);
    }

    /// Set of input (level-0) indices feeding the given point, computed by
    /// recursively expanding the pooling lists.
    pub fn receptive_field(&self, level: usize, index: usize) -> Result<BTreeSet<u32>> {
        if level == 0 || level >= self.levels.len() {
            return Err(Error::InvalidArgument(format!(
                "receptive_field level {} out of range 1..{}",
                level,
                self.levels.len()
            )));
        }
        if index >= self.levels[level].positions.len() {
            return Err(Error::InvalidArgument(format!(
                "point index {index} out of range at level {level}"
            )));
        }
        let mut frontier: BTreeSet<u32> = [index as u32].into();
        for l in (1..=level).rev() {
            let pool = self.levels[l].pool_neighbors.as_ref().expect("level >= 1 has pooling");
            let mut next = BTreeSet::new();
            for &i in &frontier {
                for &j in &pool.lists[i as usize] {
                    next.insert(j);
                }
            }
            frontier = next;
        }
        Ok(frontier)
    }

    /// Receptive fields of every point at `level`, sharing the expansion work
    /// level by level.
    pub fn receptive_fields_at(&self, level: usize) -> Result<Vec<BTreeSet<u32>>> {
        if level == 0 || level >= self.levels.len() {
            return Err(Error::InvalidArgument(format!("level {level} out of range")));
        }
        let mut fields: Vec<BTreeSet<u32>> = (0..self.point_count(0))
            .map(|i| [i as u32].into())
            .collect();
        for l in 1..=level {
            let pool = self.levels[l].pool_neighbors.as_ref().unwrap();
            let mut next = Vec::with_capacity(pool.lists.len());
            for list in &pool.lists {
                let mut f = BTreeSet::new();
                for &j in list {
                    f.extend(fields[j as usize].iter().copied());
                }
                next.push(f);
            }
            fields = next;
        }
        Ok(fields)
    }
}

/// Builds the hierarchy: voxel subsampling per level, pooling by radius
/// search into the previous level, and nearest-coarse-point upsample maps.
/// Stops early if a level would not shrink the cloud to at least one point.
pub fn build_hierarchy(cloud: &PointCloud, config: &HierarchyConfig) -> Result<Hierarchy> {
    config.validate()?;
    if cloud.is_empty() {
        return Err(Error::InvalidArgument("cannot build hierarchy from empty cloud".into()));
    }
    let mut levels = vec![HierarchyLevel {
        positions: cloud.positions.clone(),
        pool_neighbors: None,
        upsample_map: None,
    }];
    for l in 1..config.levels {
        let voxel = config.base_voxel * config.voxel_ratio.powi(l as i32 - 1);
        let prev = &levels[l - 1].positions;
        let prev_cloud = PointCloud::new(prev.clone(), vec![0; prev.len()])?;
        let (coarse, _) = grid_subsample(&prev_cloud, voxel)?;
        if coarse.is_empty() {
            break;
        }
        let radius = config.radius_factor * voxel;
        let pool = radius_neighbors(&coarse, prev, radius, config.neighbor_cap)?;
        let upsample = nearest_neighbor(prev, &coarse)?;
        levels.push(HierarchyLevel {
            positions: coarse,
            pool_neighbors: Some(pool),
            upsample_map: Some(upsample),
        });
    }
    Ok(Hierarchy { levels })
}

const HIERARCHY_MAGIC: &[u8; 8] = b"RFCRHIER";
const HIERARCHY_VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

impl Hierarchy {
    /// Serializes to the flat little-endian container: magic, version, level
    /// count, then per level the positions and (for levels >= 1) the pooling
    /// lists and upsample map.
    pub fn dump(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(HIERARCHY_MAGIC)?;
        write_u32(w, HIERARCHY_VERSION)?;
        write_u32(w, self.levels.len() as u32)?;
        for (l, level) in self.levels.iter().enumerate() {
            write_u64(w, level.positions.len() as u64)?;
            for p in &level.positions {
                for c in p {
                    w.write_all(&c.to_le_bytes())?;
                }
            }
            if l >= 1 {
                let pool = level.pool_neighbors.as_ref().ok_or_else(|| {
                    Error::Contract(format!("level {l} missing pool neighbors"))
                })?;
                write_u64(w, pool.support_count as u64)?;
                for list in &pool.lists {
                    write_u32(w, list.len() as u32)?;
                    for &i in list {
                        write_u32(w, i)?;
                    }
                }
                let up = level.upsample_map.as_ref().ok_or_else(|| {
                    Error::Contract(format!("level {l} missing upsample map"))
                })?;
                write_u64(w, up.len() as u64)?;
                for &i in up {
                    write_u32(w, i)?;
                }
            }
        }
        Ok(())
    }

    pub fn load(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != HIERARCHY_MAGIC {
            return Err(Error::Format("bad hierarchy magic".into()));
        }
        let version = read_u32(r)?;
        if version != HIERARCHY_VERSION {
            return Err(Error::Format(format!("unsupported hierarchy version {version}")));
        }
        let level_count = read_u32(r)? as usize;
        let mut levels = Vec::with_capacity(level_count);
        for l in 0..level_count {
            let n = read_u64(r)? as usize;
            let mut positions = Vec::with_capacity(n);
            for _ in 0..n {
                positions.push([read_f64(r)?, read_f64(r)?, read_f64(r)?]);
            }
            let (pool_neighbors, upsample_map) = if l >= 1 {
                let support_count = read_u64(r)? as usize;
                let mut lists = Vec::with_capacity(n);
                for _ in 0..n {
                    let len = read_u32(r)? as usize;
                    let mut list = Vec::with_capacity(len);
                    for _ in 0..len {
                        list.push(read_u32(r)?);
                    }
                    lists.push(list);
                }
                let up_len = read_u64(r)? as usize;
                let mut up = Vec::with_capacity(up_len);
                for _ in 0..up_len {
                    up.push(read_u32(r)?);
                }
                (Some(NeighborLists { lists, support_count }), Some(up))
            } else {
                (None, None)
            };
            levels.push(HierarchyLevel { positions, pool_neighbors, upsample_map });
        }
        Ok(Hierarchy { levels })
    }
}
