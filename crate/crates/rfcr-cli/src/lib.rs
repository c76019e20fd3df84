//! Implementations behind the `rfcr` binary's subcommands. Each command is
//! a pure function from parsed arguments to a [`CommandOutcome`]; the thin
//! `main` maps errors to exit codes (0 success, 1 usage, 2 data error,
//! 3 numeric divergence).

use std::collections::VecDeque;
use std::fs;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rfcr_core::datasets::{
    default_palette, mini_room_spec, read_xyzl, synth_scene, write_ply_labeled, write_xyzl,
    DatasetSplit, SceneSpec,
};
use rfcr_core::error::{Error, Result};
use rfcr_core::evaluation::{
    magnitude_histogram, miou, rfcc_accuracy, small_magnitude_fraction, ConfusionMatrix,
};
use rfcr_core::geometry::PointCloud;
use rfcr_core::hierarchy::{build_hierarchy, HierarchyConfig};
use rfcr_core::kv::{kv_get, parse_field, parse_kv};
use rfcr_core::network::{forward, input_features, predict_labels, NetworkParams};
use rfcr_core::rfcc::{gen_targets, majority_code};
use rfcr_core::training::{train, TargetMode, TrainConfig, TrainOutcome};

/// What a finished command reports back to `main`.
#[derive(Debug)]
pub struct CommandOutcome {
    pub summary: String,
    pub artifacts: Vec<PathBuf>,
}

/// Maps a core error onto the documented process exit codes.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) => 1,
        Error::Diverged(_) | Error::Numeric(_) => 3,
        _ => 2,
    }
}

/// Stable 64-bit FNV-1a over a canonical config string, printed in the
/// ablation table for provenance.
pub fn config_hash(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn hierarchy_config_from_kv(kv: &[(String, String)]) -> Result<HierarchyConfig> {
    let mut cfg = HierarchyConfig::default();
    if let Some(v) = parse_field::<usize>(kv, "levels")? {
        cfg.levels = v;
    }
    if let Some(v) = parse_field::<f64>(kv, "base_voxel")? {
        cfg.base_voxel = v;
    }
    if let Some(v) = parse_field::<f64>(kv, "voxel_ratio")? {
        cfg.voxel_ratio = v;
    }
    if let Some(v) = parse_field::<f64>(kv, "radius_factor")? {
        cfg.radius_factor = v;
    }
    if let Some(v) = parse_field::<usize>(kv, "neighbor_cap")? {
        cfg.neighbor_cap = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_mask(text: &str) -> Result<Option<Vec<usize>>> {
    if text == "all" {
        return Ok(None);
    }
    if text.trim().is_empty() {
        return Ok(Some(Vec::new()));
    }
    let levels: Result<Vec<usize>> = text
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("bad mask level {p:?}")))
        })
        .collect();
    Ok(Some(levels?))
}

/// Full run description parsed from one `key = value` config file:
/// dataset split, class count, hierarchy geometry, and optimizer settings.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub split: DatasetSplit,
    pub class_count: usize,
    pub hierarchy: HierarchyConfig,
    pub train: TrainConfig,
    /// Canonical text whose hash identifies this configuration.
    pub canonical: String,
}

impl RunSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let kv = parse_kv(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));

        let split_path = kv_get(&kv, "split").ok_or_else(|| {
            Error::InvalidInput("config must set 'split = <manifest path>'".into())
        })?;
        let split_path = base.join(split_path);
        let manifest_dir = split_path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        let raw = DatasetSplit::read(&split_path)?;
        let split = DatasetSplit {
            train: raw.train.iter().map(|p| manifest_dir.join(p)).collect(),
            val: raw.val.iter().map(|p| manifest_dir.join(p)).collect(),
        };
        split.validate()?;

        let class_count = parse_field::<usize>(&kv, "classes")?.unwrap_or(4);
        if class_count == 0 {
            return Err(Error::InvalidInput("classes must be >= 1".into()));
        }
        let hierarchy = hierarchy_config_from_kv(&kv)?;
        let train = TrainConfig::from_kv(&kv)?;
        let mut spec = RunSpec { split, class_count, hierarchy, train, canonical: String::new() };
        spec.refresh_canonical();
        Ok(spec)
    }

    pub fn refresh_canonical(&mut self) {
        self.canonical = format!(
            "classes = {}\nlevels = {}\nbase_voxel = {}\nvoxel_ratio = {}\n\
             radius_factor = {}\nneighbor_cap = {}\n{}",
            self.class_count,
            self.hierarchy.levels,
            self.hierarchy.base_voxel,
            self.hierarchy.voxel_ratio,
            self.hierarchy.radius_factor,
            self.hierarchy.neighbor_cap,
            self.train.to_kv_string(),
        );
    }

    pub fn load_scenes(&self) -> Result<(Vec<PointCloud>, Vec<PointCloud>)> {
        let train = self.split.train.iter().map(|p| read_xyzl(p)).collect::<Result<Vec<_>>>()?;
        let val = self.split.val.iter().map(|p| read_xyzl(p)).collect::<Result<Vec<_>>>()?;
        Ok((train, val))
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    Ok(())
}

/// `rfcr synth`: generate a family of synthetic scenes plus a split manifest.
/// Without `--config`, mini-room scenes are generated procedurally.
pub fn cmd_synth(
    config: Option<&Path>,
    out_dir: &Path,
    count: usize,
    seed: u64,
    classes: usize,
) -> Result<CommandOutcome> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be >= 1".into()));
    }
    let template = match config {
        Some(p) => Some(SceneSpec::load(p)?),
        None => None,
    };
    ensure_dir(out_dir)?;
    let mut artifacts = Vec::new();
    let mut names = Vec::new();
    for i in 0..count {
        let scene_seed = seed.wrapping_add(i as u64);
        let spec = match &template {
            Some(t) => {
                let mut s = t.clone();
                s.seed = scene_seed;
                s
            }
            None => mini_room_spec(scene_seed, classes),
        };
        let cloud = synth_scene(&spec)?;
        let name = format!("scene_{i:03}.xyzl");
        let path = out_dir.join(&name);
        write_xyzl(&cloud, &path)?;
        artifacts.push(path);
        names.push(PathBuf::from(name));
    }
    // Roughly one in five scenes goes to validation (at least one when
    // there are two or more scenes).
    let val_count = if count >= 2 { (count + 4) / 5 } else { 0 };
    let split = DatasetSplit {
        train: names[..count - val_count].to_vec(),
        val: names[count - val_count..].to_vec(),
    };
    let manifest = out_dir.join("split.txt");
    split.write(&manifest)?;
    artifacts.push(manifest);
    Ok(CommandOutcome {
        summary: format!(
            "wrote {count} scenes ({} train / {val_count} val) to {}",
            count - val_count,
            out_dir.display()
        ),
        artifacts,
    })
}

/// `rfcr hierarchy`: build and dump the sampling hierarchy of one scene.
pub fn cmd_hierarchy(
    scene: &Path,
    config: Option<&Path>,
    out: &Path,
) -> Result<CommandOutcome> {
    let cloud = read_xyzl(scene)?;
    let hcfg = match config {
        Some(p) => hierarchy_config_from_kv(&parse_kv(&fs::read_to_string(p)?)?)?,
        None => HierarchyConfig::default(),
    };
    let h = build_hierarchy(&cloud, &hcfg)?;
    let mut w = BufWriter::new(fs::File::create(out)?);
    h.dump(&mut w)?;
    w.flush()?;
    let counts: Vec<String> =
        (0..h.level_count()).map(|l| h.point_count(l).to_string()).collect();
    Ok(CommandOutcome {
        summary: format!("hierarchy with {} levels, point counts [{}]", h.level_count(), counts.join(", ")),
        artifacts: vec![out.to_path_buf()],
    })
}

/// `rfcr rfcc`: build the hierarchy and code stack for one scene and write
/// both binaries plus a text summary.
pub fn cmd_rfcc(
    scene: &Path,
    config: Option<&Path>,
    out_prefix: &Path,
    mode: &str,
    classes: usize,
) -> Result<CommandOutcome> {
    let cloud = read_xyzl(scene)?;
    let hcfg = match config {
        Some(p) => hierarchy_config_from_kv(&parse_kv(&fs::read_to_string(p)?)?)?,
        None => HierarchyConfig::default(),
    };
    let h = build_hierarchy(&cloud, &hcfg)?;
    let stack = match mode {
        "multi_hot" => gen_targets(&h, &cloud.labels, classes)?,
        "one_hot" => majority_code(&h, &cloud.labels, classes)?,
        other => return Err(Error::InvalidArgument(format!("unknown rfcc mode {other:?}"))),
    };

    if let Some(dir) = out_prefix.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    let hier_path = out_prefix.with_extension("hier");
    let rfcc_path = out_prefix.with_extension("rfcc");
    let txt_path = out_prefix.with_extension("txt");
    let mut w = BufWriter::new(fs::File::create(&hier_path)?);
    h.dump(&mut w)?;
    w.flush()?;
    let mut w = BufWriter::new(fs::File::create(&rfcc_path)?);
    stack.dump(&mut w)?;
    w.flush()?;

    let mut text = String::from("level points mean_popcount\n");
    for (k, codes) in stack.levels.iter().enumerate() {
        let total: u64 = (0..codes.rows).map(|i| u64::from(codes.popcount(i))).sum();
        let mean = if codes.rows == 0 { 0.0 } else { total as f64 / codes.rows as f64 };
        text.push_str(&format!("{} {} {:.6}\n", k + 1, codes.rows, mean));
    }
    fs::write(&txt_path, &text)?;
    Ok(CommandOutcome {
        summary: format!("{mode} codes over {} levels written to {}", stack.levels.len(), out_prefix.display()),
        artifacts: vec![hier_path, rfcc_path, txt_path],
    })
}

/// Runs one training job and writes checkpoint + metrics + final losses
/// into `out_dir`.
fn run_training(spec: &RunSpec, out_dir: &Path) -> Result<(TrainOutcome, Vec<PathBuf>)> {
    let (train_scenes, val_scenes) = spec.load_scenes()?;
    let outcome = train(
        &train_scenes,
        &val_scenes,
        &spec.hierarchy,
        None,
        &spec.train,
        spec.class_count,
    )?;
    ensure_dir(out_dir)?;
    let ckpt = out_dir.join("checkpoint.bin");
    let mut w = BufWriter::new(fs::File::create(&ckpt)?);
    outcome.params.save(&mut w)?;
    w.flush()?;
    let metrics = out_dir.join("metrics.csv");
    fs::write(&metrics, outcome.record.to_csv())?;
    let losses = out_dir.join("loss.txt");
    let last = outcome.record.final_epoch();
    let text = match last {
        Some(e) => format!(
            "L_S = {}\nL_R = {}\nL_F = {}\ntotal = {}\nmiou = {}\nrfcc_oa = {}\n",
            e.semantic, e.reasoning, e.densification, e.total, e.val_miou, e.rfcc_oa
        ),
        None => "no epochs run\n".to_string(),
    };
    fs::write(&losses, text)?;
    let echo = out_dir.join("config_echo.txt");
    fs::write(&echo, format!("# hash {:016x}\n{}", config_hash(&spec.canonical), spec.canonical))?;
    Ok((outcome, vec![ckpt, metrics, losses, echo]))
}

/// `rfcr train`: full training run from a config file, with optional
/// command-line overrides for seed, target mode, and supervision mask.
pub fn cmd_train(
    config: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    mode: Option<&str>,
    mask: Option<&str>,
) -> Result<CommandOutcome> {
    let mut spec = RunSpec::load(config)?;
    if let Some(s) = seed {
        spec.train.seed = s;
    }
    if let Some(m) = mode {
        spec.train.target_mode = TargetMode::parse(m)
            .map_err(|_| Error::InvalidArgument(format!("unknown target mode {m:?}")))?;
    }
    if let Some(m) = mask {
        spec.train.supervision_mask = parse_mask(m)?;
    }
    spec.refresh_canonical();
    let (outcome, artifacts) = run_training(&spec, out_dir)?;
    let last = outcome.record.final_epoch();
    let summary = match last {
        Some(e) => format!(
            "trained {} epochs over {} levels: total loss {:.6}, val mIoU {:.4}, rfcc OA {:.4}",
            outcome.record.epochs.len(),
            outcome.levels,
            e.total,
            e.val_miou,
            e.rfcc_oa
        ),
        None => format!("wrote initialization checkpoint ({} levels)", outcome.levels),
    };
    Ok(CommandOutcome { summary, artifacts })
}

/// `rfcr eval`: evaluate a checkpoint on the validation split and write
/// IoU table, RFCC accuracy, magnitude histograms, and prediction PLYs.
pub fn cmd_eval(checkpoint: &Path, config: &Path, out_dir: &Path) -> Result<CommandOutcome> {
    let spec = RunSpec::load(config)?;
    let mut r = BufReader::new(fs::File::open(checkpoint).map_err(|e| {
        Error::InvalidInput(format!("cannot open checkpoint {}: {e}", checkpoint.display()))
    })?);
    let params = NetworkParams::load(&mut r)?;
    let net_levels = params.config.levels();
    if params.config.class_count != spec.class_count {
        return Err(Error::Format(format!(
            "checkpoint has {} classes but config says {}",
            params.config.class_count, spec.class_count
        )));
    }

    let (_, val_scenes) = spec.load_scenes()?;
    // Evaluate everything in memory first so a failure leaves no partial
    // output directory behind.
    let mut cm = ConfusionMatrix::new(spec.class_count);
    let mut oa_num = 0.0;
    let mut oa_den = 0.0;
    let mut plys: Vec<(PointCloud, Vec<i32>)> = Vec::new();
    let mut all_fd: Vec<rfcr_core::mat::Matrix> = Vec::new();
    for scene in &val_scenes {
        let mut h = build_hierarchy(scene, &spec.hierarchy)?;
        if h.level_count() < net_levels {
            return Err(Error::Format(format!(
                "scene hierarchy has {} levels but checkpoint expects {}",
                h.level_count(),
                net_levels
            )));
        }
        h.truncate(net_levels);
        let input = input_features(&scene.positions);
        let (out, _) = forward(&params, &h, &input)?;
        let preds = predict_labels(&out.final_probs);
        cm.add(&scene.labels, &preds)?;
        let codes = gen_targets(&h, &scene.labels, spec.class_count)?;
        let mask = vec![true; out.level_probs.len()];
        let oa = rfcc_accuracy(&out.level_probs, &codes, 0.5, &mask)?;
        let bits: usize = out.level_probs.iter().map(|m| m.rows * m.cols).sum();
        oa_num += oa * bits as f64;
        oa_den += bits as f64;
        all_fd.extend(out.fd_features.iter().cloned());
        plys.push((scene.clone(), preds));
    }
    let (per_class, mean) = miou(&cm)?;
    let oa = if oa_den > 0.0 { oa_num / oa_den } else { 0.0 };
    let edges: Vec<f64> = (0..=20).map(|i| i as f64 * 0.1).collect();
    let hist = magnitude_histogram(&all_fd, &edges)?;
    let small = small_magnitude_fraction(&all_fd, 0.1);

    ensure_dir(out_dir)?;
    let mut artifacts = Vec::new();
    let iou_path = out_dir.join("iou.csv");
    let mut text = String::from("class,iou\n");
    for (c, v) in per_class.iter().enumerate() {
        match v {
            Some(x) => text.push_str(&format!("{c},{x}\n")),
            None => text.push_str(&format!("{c},\n")),
        }
    }
    fs::write(&iou_path, text)?;
    artifacts.push(iou_path);

    let summary_path = out_dir.join("summary.txt");
    fs::write(
        &summary_path,
        format!("miou = {mean}\nrfcc_oa = {oa}\nbelow_0.1_fraction = {small}\n"),
    )?;
    artifacts.push(summary_path);

    let hist_path = out_dir.join("hist.csv");
    let mut text = String::from("level,bin_lo,bin_hi,count\n");
    for (l, bins) in hist.counts.iter().enumerate() {
        for (b, count) in bins.iter().enumerate() {
            let hi = if b + 1 < hist.edges.len() {
                hist.edges[b + 1].to_string()
            } else {
                "inf".to_string()
            };
            text.push_str(&format!("{},{},{},{}\n", l + 2, hist.edges[b], hi, count));
        }
    }
    fs::write(&hist_path, text)?;
    artifacts.push(hist_path);

    let palette = default_palette(spec.class_count);
    for (i, (scene, preds)) in plys.iter().enumerate() {
        let path = out_dir.join(format!("pred_{i:03}.ply"));
        write_ply_labeled(scene, preds, &palette, &path)?;
        artifacts.push(path);
    }
    Ok(CommandOutcome {
        summary: format!(
            "evaluated {} scenes: mIoU {mean:.4}, rfcc OA {oa:.4}, |feat|<0.1 fraction {small:.4}",
            val_scenes.len()
        ),
        artifacts,
    })
}

/// One cell of the ablation grid: a name plus the edits applied to the
/// base configuration.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub name: String,
    pub spec: RunSpec,
}

/// The fixed ablation grid: seven supervision modes plus one
/// leave-one-scale-out row per supervised level.
pub fn ablation_grid(base: &RunSpec) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    let mut push = |name: &str, edit: &dyn Fn(&mut TrainConfig)| {
        let mut spec = base.clone();
        // Reset the mode axes so every cell derives from the same baseline.
        spec.train.lambda1 = 1.0;
        spec.train.lambda2 = 1.0;
        spec.train.target_mode = TargetMode::MultiHot;
        spec.train.head_side = rfcr_core::network::HeadSide::Decoder;
        spec.train.fd_enabled = true;
        spec.train.supervision_mask = None;
        edit(&mut spec.train);
        spec.refresh_canonical();
        cells.push(AblationCell { name: name.to_string(), spec });
    };
    push("baseline", &|t| {
        t.lambda1 = 0.0;
        t.lambda2 = 0.0;
        t.fd_enabled = false;
    });
    push("rfcr", &|t| {
        t.lambda2 = 0.0;
        t.fd_enabled = false;
    });
    push("rfcr_fd", &|_| {});
    push("fd_only", &|t| t.lambda1 = 0.0);
    push("one_hot", &|t| t.target_mode = TargetMode::OneHot);
    push("ovu", &|t| t.target_mode = TargetMode::Ovu);
    push("encoder_side", &|t| t.head_side = rfcr_core::network::HeadSide::Encoder);
    for level in 2..=base.hierarchy.levels {
        let kept: Vec<usize> = (2..=base.hierarchy.levels).filter(|&l| l != level).collect();
        push(&format!("mask_drop_{level}"), &|t| {
            t.supervision_mask = Some(kept.clone());
        });
    }
    cells
}

/// `rfcr ablate`: run the full grid (optionally across threads) and write a
/// comparison table. Individual cell failures are recorded and the grid
/// continues.
pub fn cmd_ablate(config: &Path, out_dir: &Path, threads: usize) -> Result<CommandOutcome> {
    let base = RunSpec::load(config)?;
    let cells = ablation_grid(&base);
    ensure_dir(out_dir)?;

    struct CellResult {
        name: String,
        hash: u64,
        line: String,
    }
    let queue: Mutex<VecDeque<usize>> = Mutex::new((0..cells.len()).collect());
    let results: Mutex<Vec<Option<CellResult>>> =
        Mutex::new((0..cells.len()).map(|_| None).collect());
    let workers = threads.max(1).min(cells.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = match queue.lock().unwrap().pop_front() {
                    Some(i) => i,
                    None => break,
                };
                let cell = &cells[idx];
                let hash = config_hash(&cell.spec.canonical);
                let cell_dir = out_dir.join(&cell.name);
                let line = match run_training(&cell.spec, &cell_dir) {
                    Ok((outcome, _)) => match outcome.record.final_epoch() {
                        Some(e) => format!(
                            "{},{:016x},ok,{},{},{},{},{},{}",
                            cell.name, hash, e.semantic, e.reasoning, e.densification,
                            e.total, e.val_miou, e.rfcc_oa
                        ),
                        None => format!("{},{:016x},ok,,,,,,", cell.name, hash),
                    },
                    Err(err) => format!(
                        "{},{:016x},error: {},,,,,,",
                        cell.name,
                        hash,
                        err.to_string().replace(',', ";")
                    ),
                };
                results.lock().unwrap()[idx] =
                    Some(CellResult { name: cell.name.clone(), hash, line });
            });
        }
    });

    let results = results.into_inner().unwrap();
    let mut table = String::from("mode,config_hash,status,L_S,L_R,L_F,total,miou,rfcc_oa\n");
    let mut failures = 0usize;
    for r in results.iter().flatten() {
        if r.line.contains(",error:") {
            failures += 1;
        }
        table.push_str(&r.line);
        table.push('\n');
        let _ = (&r.name, r.hash);
    }
    let table_path = out_dir.join("ablation.csv");
    fs::write(&table_path, table)?;
    Ok(CommandOutcome {
        summary: format!(
            "ran {} ablation cells ({} failed) into {}",
            cells.len(),
            failures,
            out_dir.display()
        ),
        artifacts: vec![table_path],
    })
}
