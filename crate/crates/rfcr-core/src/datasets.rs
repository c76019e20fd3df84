//! Synthetic labeled mini-room generation plus text-format point-cloud I/O
//! (.xyzl lines and ASCII PLY export).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, IGNORE_LABEL};
use crate::kv::{kv_get_all, parse_field, parse_kv};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Plane,
    Box,
    Sphere,
    Cylinder,
}

impl ShapeKind {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "plane" => Ok(Self::Plane),
            "box" => Ok(Self::Box),
            "sphere" => Ok(Self::Sphere),
            "cylinder" => Ok(Self::Cylinder),
            other => Err(Error::InvalidInput(format!("unknown shape kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub kind: ShapeKind,
    pub center: Point3,
    /// Plane: x/y extent. Box: full edge lengths. Sphere: radius in `size[0]`.
    /// Cylinder: radius in `size[0]`, height in `size[2]`.
    pub size: Point3,
    pub class: i32,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub extent: Point3,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Unlabeled clutter points scattered through the extent.
    pub clutter_points: usize,
    pub class_count: usize,
    pub primitives: Vec<Primitive>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidInput("noise sigma must be >= 0".into()));
        }
        if self.primitives.is_empty() {
            return Err(Error::InvalidInput("scene needs at least one primitive".into()));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if p.points == 0 {
                return Err(Error::InvalidInput(format!("primitive {i} has zero points")));
            }
            if p.class < 0 || p.class as usize >= self.class_count {
                return Err(Error::InvalidInput(format!(
                    "primitive {i} class {} out of range",
                    p.class
                )));
            }
            let degenerate = match p.kind {
                ShapeKind::Plane => p.size[0] <= 0.0 || p.size[1] <= 0.0,
                ShapeKind::Box => p.size.iter().any(|&s| s <= 0.0),
                ShapeKind::Sphere => p.size[0] <= 0.0,
                ShapeKind::Cylinder => p.size[0] <= 0.0 || p.size[2] <= 0.0,
            };
            if degenerate {
                return Err(Error::InvalidInput(format!(
                    "primitive {i} has a degenerate (zero) scale"
                )));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let extent = parse_point(kv_get_required(&kv, "extent")?)?;
        let noise_sigma = parse_field::<f64>(&kv, "sigma")?.unwrap_or(0.0);
        let seed = parse_field::<u64>(&kv, "seed")?.unwrap_or(0);
        let clutter_points = parse_field::<usize>(&kv, "clutter")?.unwrap_or(0);
        let class_count = parse_field::<usize>(&kv, "classes")?
            .ok_or_else(|| Error::InvalidInput("scene spec missing 'classes'".into()))?;
        let mut primitives = Vec::new();
        for line in kv_get_all(&kv, "primitive") {
            primitives.push(parse_primitive(line)?);
        }
        let spec = SceneSpec { extent, noise_sigma, seed, clutter_points, class_count, primitives };
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("extent = {} {} {}\n", self.extent[0], self.extent[1], self.extent[2]));
        s.push_str(&format!("sigma = {}\n", self.noise_sigma));
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("clutter = {}\n", self.clutter_points));
        s.push_str(&format!("classes = {}\n", self.class_count));
        for p in &self.primitives {
            let kind = match p.kind {
                ShapeKind::Plane => "plane",
                ShapeKind::Box => "box",
                ShapeKind::Sphere => "sphere",
                ShapeKind::Cylinder => "cylinder",
            };
            s.push_str(&format!(
                "primitive = {kind} {} {} {} {} {} {} {} {}\n",
                p.center[0], p.center[1], p.center[2], p.size[0], p.size[1], p.size[2],
                p.class, p.points
            ));
        }
        s
    }
}

fn kv_get_required<'a>(kv: &'a [(String, String)], key: &str) -> Result<&'a str> {
    crate::kv::kv_get(kv, key)
        .ok_or_else(|| Error::InvalidInput(format!("scene spec missing '{key}'")))
}

fn parse_point(s: &str) -> Result<Point3> {
    let parts: Vec<&str> = s.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::InvalidInput(format!("expected 3 coordinates in {s:?}")));
    }
    let mut p = [0.0; 3];
    for (dst, part) in p.iter_mut().zip(&parts) {
        *dst = part
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad coordinate {part:?}")))?;
    }
    Ok(p)
}

fn parse_primitive(s: &str) -> Result<Primitive> {
    let parts: Vec<&str> = s.split_whitespace().collect();
    if parts.len() != 9 {
        return Err(Error::InvalidInput(format!(
            "primitive needs 'kind cx cy cz sx sy sz class points', got {s:?}"
        )));
    }
    let kind = ShapeKind::parse(parts[0])?;
    let num = |i: usize| -> Result<f64> {
        parts[i]
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad primitive number {:?}", parts[i])))
    };
    Ok(Primitive {
        kind,
        center: [num(1)?, num(2)?, num(3)?],
        size: [num(4)?, num(5)?, num(6)?],
        class: parts[7]
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad class {:?}", parts[7])))?,
        points: parts[8]
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad point count {:?}", parts[8])))?,
    })
}

fn unit_direction(rng: &mut ChaCha8Rng) -> Point3 {
    loop {
        let v = [gaussian(rng), gaussian(rng), gaussian(rng)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller, one draw per call.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn sample_primitive(p: &Primitive, rng: &mut ChaCha8Rng) -> Point3 {
    let c = p.center;
    match p.kind {
        ShapeKind::Plane => [
            c[0] + rng.gen_range(-0.5..0.5) * p.size[0],
            c[1] + rng.gen_range(-0.5..0.5) * p.size[1],
            c[2],
        ],
        ShapeKind::Box => {
            let (sx, sy, sz) = (p.size[0], p.size[1], p.size[2]);
            let areas = [sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy];
            let total: f64 = areas.iter().sum();
            let mut pick = rng.gen_range(0.0..total);
            let mut face = 5;
            for (i, &a) in areas.iter().enumerate() {
                if pick < a {
                    face = i;
                    break;
                }
                pick -= a;
            }
            let u = rng.gen_range(-0.5..0.5);
            let v = rng.gen_range(-0.5..0.5);
            match face {
                0 => [c[0] - sx / 2.0, c[1] + u * sy, c[2] + v * sz],
                1 => [c[0] + sx / 2.0, c[1] + u * sy, c[2] + v * sz],
                2 => [c[0] + u * sx, c[1] - sy / 2.0, c[2] + v * sz],
                3 => [c[0] + u * sx, c[1] + sy / 2.0, c[2] + v * sz],
                4 => [c[0] + u * sx, c[1] + v * sy, c[2] - sz / 2.0],
                _ => [c[0] + u * sx, c[1] + v * sy, c[2] + sz / 2.0],
            }
        }
        ShapeKind::Sphere => {
            let d = unit_direction(rng);
            let r = p.size[0];
            [c[0] + d[0] * r, c[1] + d[1] * r, c[2] + d[2] * r]
        }
        ShapeKind::Cylinder => {
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = p.size[0];
            let z = rng.gen_range(-0.5..0.5) * p.size[2];
            [c[0] + r * theta.cos(), c[1] + r * theta.sin(), c[2] + z]
        }
    }
}

/// Deterministic surface sampling with Gaussian jitter; clutter points are
/// scattered uniformly through the extent and marked IGNORE.
pub fn synth_scene(spec: &SceneSpec) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut positions = Vec::new();
    let mut labels = Vec::new();
    for p in &spec.primitives {
        for _ in 0..p.points {
            let mut pos = sample_primitive(p, &mut rng);
            if spec.noise_sigma > 0.0 {
                for d in pos.iter_mut() {
                    *d += spec.noise_sigma * gaussian(&mut rng);
                }
            }
            positions.push(pos);
            labels.push(p.class);
        }
    }
    for _ in 0..spec.clutter_points {
        positions.push([
            rng.gen_range(0.0..spec.extent[0]),
            rng.gen_range(0.0..spec.extent[1]),
            rng.gen_range(0.0..spec.extent[2]),
        ]);
        labels.push(IGNORE_LABEL);
    }
    PointCloud::new(positions, labels)
}

/// Random mini-room: a floor plane plus a few objects of distinct classes.
/// Class 0 is always the floor.
pub fn mini_room_spec(seed: u64, class_count: usize) -> SceneSpec {
    assert!(class_count >= 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d696e69726f6f6d);
    let extent = [6.0, 6.0, 3.0];
    let mut primitives = vec![Primitive {
        kind: ShapeKind::Plane,
        center: [3.0, 3.0, 0.0],
        size: [6.0, 6.0, 0.0],
        class: 0,
        points: 900,
    }];
    let n_objects = rng.gen_range(2..=4);
    for k in 0..n_objects {
        let class = 1 + (k % (class_count - 1)) as i32;
        let kind = match rng.gen_range(0..3) {
            0 => ShapeKind::Box,
            1 => ShapeKind::Sphere,
            _ => ShapeKind::Cylinder,
        };
        let cx = rng.gen_range(1.0..5.0);
        let cy = rng.gen_range(1.0..5.0);
        let s = rng.gen_range(0.4..0.9);
        let (center, size) = match kind {
            ShapeKind::Box => ([cx, cy, s / 2.0], [s, s, s]),
            ShapeKind::Sphere => ([cx, cy, s], [s / 2.0, 0.0, 0.0]),
            _ => ([cx, cy, s / 2.0], [s / 3.0, 0.0, s]),
        };
        primitives.push(Primitive { kind, center, size, class, points: 450 });
    }
    SceneSpec {
        extent,
        noise_sigma: 0.01,
        seed,
        clutter_points: 40,
        class_count,
        primitives,
    }
}

/// Train/validation file lists.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<PathBuf>,
    pub val: Vec<PathBuf>,
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() || self.val.is_empty() {
            return Err(Error::InvalidInput("both splits must be non-empty".into()));
        }
        for t in &self.train {
            if self.val.contains(t) {
                return Err(Error::InvalidInput(format!("{t:?} appears in both splits")));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for p in &self.train {
            writeln!(f, "train {}", p.display())?;
        }
        for p in &self.val {
            writeln!(f, "val {}", p.display())?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut split = DatasetSplit { train: Vec::new(), val: Vec::new() };
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let (tag, p) = line.split_once(' ').ok_or_else(|| Error::Parse {
                line: idx + 1,
                message: "expected 'train <path>' or 'val <path>'".into(),
            })?;
            match tag {
                "train" => split.train.push(PathBuf::from(p.trim())),
                "val" => split.val.push(PathBuf::from(p.trim())),
                other => {
                    return Err(Error::Parse {
                        line: idx + 1,
                        message: format!("unknown split tag {other:?}"),
                    })
                }
            }
        }
        Ok(split)
    }
}

/// Reads the one-point-per-line ASCII format `x y z label` (-1 = IGNORE).
pub fn read_xyzl(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    let mut positions = Vec::new();
    let mut labels = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("expected 'x y z label', got {line:?}"),
            });
        }
        let mut pos = [0.0; 3];
        for (d, part) in pos.iter_mut().zip(&parts[..3]) {
            *d = part.parse().map_err(|_| Error::Parse {
                line: idx + 1,
                message: format!("bad coordinate {part:?}"),
            })?;
        }
        let label: i32 = parts[3].parse().map_err(|_| Error::Parse {
            line: idx + 1,
            message: format!("bad label {:?}", parts[3]),
        })?;
        positions.push(pos);
        labels.push(label);
    }
    if positions.is_empty() {
        return Err(Error::InvalidInput(format!("{} contains no points", path.display())));
    }
    PointCloud::new(positions, labels)
}

/// Writes the `.xyzl` text format with 9 significant digits.
pub fn write_xyzl(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(cloud.len() * 40);
    for (p, &l) in cloud.positions.iter().zip(&cloud.labels) {
        out.push_str(&format!("{:.9e} {:.9e} {:.9e} {}\n", p[0], p[1], p[2], l));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Default class palette; repeats after 10 classes.
pub fn default_palette(class_count: usize) -> Vec<[u8; 3]> {
    const BASE: [[u8; 3]; 10] = [
        [255, 0, 0],
        [0, 160, 0],
        [0, 0, 255],
        [255, 200, 0],
        [160, 0, 200],
        [0, 200, 200],
        [255, 120, 0],
        [120, 80, 40],
        [255, 0, 180],
        [90, 90, 255],
    ];
    (0..class_count).map(|c| BASE[c % BASE.len()]).collect()
}

/// ASCII PLY export with one colored vertex per point; IGNORE renders gray.
pub fn write_ply_labeled(
    cloud: &PointCloud,
    predicted: &[i32],
    palette: &[[u8; 3]],
    path: &Path,
) -> Result<()> {
    if predicted.len() != cloud.len() {
        return Err(Error::InvalidArgument("prediction count mismatch".into()));
    }
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", cloud.len()));
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    out.push_str("end_header\n");
    for (p, &l) in cloud.positions.iter().zip(predicted) {
        let rgb = if l == IGNORE_LABEL {
            [128, 128, 128]
        } else {
            *palette.get(l as usize).ok_or_else(|| {
                Error::InvalidArgument(format!("palette too short for class {l}"))
            })?
        };
        out.push_str(&format!(
            "{} {} {} {} {} {}\n",
            p[0] as f32, p[1] as f32, p[2] as f32, rgb[0], rgb[1], rgb[2]
        ));
    }
    fs::write(path, out)?;
    Ok(())
}
