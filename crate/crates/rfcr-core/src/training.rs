//! Optimization loop wiring hierarchies, targets, the network, and the
//! losses together, including every supervision ablation mode.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::evaluation::{miou, rfcc_accuracy, ConfusionMatrix};
use crate::geometry::{PointCloud, IGNORE_LABEL};
use crate::hierarchy::{build_hierarchy, Hierarchy, HierarchyConfig};
use crate::kv::{kv_get, parse_field};
use crate::losses::{
    fd_loss, reasoning_loss, semantic_ce, total_loss, LossReport, ReasoningLoss,
};
use crate::mat::Matrix;
use crate::network::{
    backward, forward, init_params, input_features, predict_labels, FdAttachment,
    ForwardOutput, HeadSide, LossGrads, NetworkConfig, NetworkParams,
};
use crate::rfcc::{gen_targets, majority_code, RfccStack};

/// Guard: abort training when the total loss crosses this bound.
pub const DIVERGENCE_LIMIT: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    MultiHot,
    OneHot,
    Ovu,
}

impl TargetMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "multi_hot" => Ok(Self::MultiHot),
            "one_hot" => Ok(Self::OneHot),
            "ovu" => Ok(Self::Ovu),
            other => Err(Error::InvalidInput(format!("unknown target mode {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::MultiHot => "multi_hot",
            Self::OneHot => "one_hot",
            Self::Ovu => "ovu",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Scenes accumulated per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    /// Supervised hierarchy levels in 1-based paper numbering (2..=L).
    /// None supervises every level.
    pub supervision_mask: Option<Vec<usize>>,
    pub target_mode: TargetMode,
    pub head_side: HeadSide,
    pub fd_enabled: bool,
    pub fd_attachment: FdAttachment,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            learning_rate: 0.05,
            lr_decay: 0.98,
            momentum: 0.9,
            epochs: 60,
            batch_size: 4,
            seed: 1,
            supervision_mask: None,
            target_mode: TargetMode::MultiHot,
            head_side: HeadSide::Decoder,
            fd_enabled: true,
            fd_attachment: FdAttachment::Identity,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::InvalidArgument("loss weights must be >= 0".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if let Some(mask) = &self.supervision_mask {
            if mask.iter().any(|&l| l < 2) {
                return Err(Error::InvalidArgument(
                    "supervision mask levels start at 2".into(),
                ));
            }
        }
        Ok(())
    }

    /// Reads the documented key set from parsed `key = value` pairs;
    /// missing keys keep their defaults.
    pub fn from_kv(kv: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(v) = parse_field::<f64>(kv, "lambda1")? {
            cfg.lambda1 = v;
        }
        if let Some(v) = parse_field::<f64>(kv, "lambda2")? {
            cfg.lambda2 = v;
        }
        if let Some(v) = parse_field::<f64>(kv, "learning_rate")? {
            cfg.learning_rate = v;
        }
        if let Some(v) = parse_field::<f64>(kv, "lr_decay")? {
            cfg.lr_decay = v;
        }
        if let Some(v) = parse_field::<f64>(kv, "momentum")? {
            cfg.momentum = v;
        }
        if let Some(v) = parse_field::<usize>(kv, "epochs")? {
            cfg.epochs = v;
        }
        if let Some(v) = parse_field::<usize>(kv, "batch_size")? {
            cfg.batch_size = v;
        }
        if let Some(v) = parse_field::<u64>(kv, "seed")? {
            cfg.seed = v;
        }
        if let Some(v) = kv_get(kv, "supervision_mask") {
            cfg.supervision_mask = if v == "all" {
                None
            } else {
                let levels: Result<Vec<usize>> = v
                    .split(',')
                    .map(|p| {
                        p.trim().parse::<usize>().map_err(|_| {
                            Error::InvalidInput(format!("bad supervision level {p:?}"))
                        })
                    })
                    .collect();
                Some(levels?)
            };
        }
        if let Some(v) = kv_get(kv, "target_mode") {
            cfg.target_mode = TargetMode::parse(v)?;
        }
        if let Some(v) = kv_get(kv, "head_side") {
            cfg.head_side = match v {
                "decoder" => HeadSide::Decoder,
                "encoder" => HeadSide::Encoder,
                other => {
                    return Err(Error::InvalidInput(format!("unknown head side {other:?}")))
                }
            };
        }
        if let Some(v) = parse_field::<bool>(kv, "fd_enabled")? {
            cfg.fd_enabled = v;
        }
        if let Some(v) = kv_get(kv, "fd_attachment") {
            cfg.fd_attachment = match v {
                "identity" => FdAttachment::Identity,
                "perceptron" => FdAttachment::Perceptron,
                other => {
                    return Err(Error::InvalidInput(format!("unknown fd attachment {other:?}")))
                }
            };
        }
        if let Some(v) = parse_field::<bool>(kv, "augment")? {
            cfg.augment = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv_string(&self) -> String {
        let mask = match &self.supervision_mask {
            None => "all".to_string(),
            Some(levels) => levels
                .iter()
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
                .join(","),
        };
        format!(
            "lambda1 = {}\nlambda2 = {}\nlearning_rate = {}\nlr_decay = {}\n\
             momentum = {}\nepochs = {}\nbatch_size = {}\nseed = {}\n\
             supervision_mask = {}\ntarget_mode = {}\nhead_side = {}\n\
             fd_enabled = {}\nfd_attachment = {}\naugment = {}\n",
            self.lambda1,
            self.lambda2,
            self.learning_rate,
            self.lr_decay,
            self.momentum,
            self.epochs,
            self.batch_size,
            self.seed,
            mask,
            self.target_mode.name(),
            match self.head_side {
                HeadSide::Decoder => "decoder",
                HeadSide::Encoder => "encoder",
            },
            self.fd_enabled,
            match self.fd_attachment {
                FdAttachment::Identity => "identity",
                FdAttachment::Perceptron => "perceptron",
            },
            self.augment,
        )
    }

    /// Per-head supervision flags for a hierarchy with `levels` levels;
    /// index k corresponds to hierarchy level k+1 (paper level k+2).
    pub fn head_mask(&self, levels: usize) -> Vec<bool> {
        (0..levels - 1)
            .map(|k| match &self.supervision_mask {
                None => true,
                Some(m) => m.contains(&(k + 2)),
            })
            .collect()
    }
}

/// Supervision targets for one scene.
#[derive(Debug, Clone)]
pub enum TargetSet {
    /// Per-level code targets (multi-hot or majority one-hot).
    Codes(RfccStack),
    /// Upsampling chains for the OvU ablation: entry k maps each input point
    /// to its representative at hierarchy level k+1.
    Ovu(Vec<Vec<u32>>),
}

/// Builds targets for the configured mode. OvU builds only upsample chains
/// and never touches code generation.
pub fn make_targets(h: &Hierarchy, labels: &[i32], class_count: usize, config: &TrainConfig) -> Result<TargetSet> {
    match config.target_mode {
        TargetMode::MultiHot => Ok(TargetSet::Codes(gen_targets(h, labels, class_count)?)),
        TargetMode::OneHot => Ok(TargetSet::Codes(majority_code(h, labels, class_count)?)),
        TargetMode::Ovu => {
            let mut chains = Vec::with_capacity(h.level_count() - 1);
            let mut current: Vec<u32> = h.levels[1].upsample_map.clone().ok_or_else(|| {
                Error::Contract("hierarchy level 1 missing upsample map".into())
            })?;
            chains.push(current.clone());
            for l in 2..h.level_count() {
                let up = h.levels[l].upsample_map.as_ref().unwrap();
                current = current.iter().map(|&j| up[j as usize]).collect();
                chains.push(current.clone());
            }
            Ok(TargetSet::Ovu(chains))
        }
    }
}

fn softmax_into(z: &[f64], out: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        let e = (v - m).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// OvU supervision: per-level softmax cross entropy of upsampled head
/// logits against the input labels.
fn ovu_loss(
    level_logits: &[Matrix],
    chains: &[Vec<u32>],
    labels: &[i32],
    mask: &[bool],
) -> Result<ReasoningLoss> {
    let n_levels = level_logits.len();
    if chains.len() != n_levels {
        return Err(Error::InvalidArgument("ovu chain count mismatch".into()));
    }
    let n_labeled = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    let mut per_level = Vec::with_capacity(n_levels);
    let mut logit_grads = Vec::with_capacity(n_levels);
    for (k, logits) in level_logits.iter().enumerate() {
        let c = logits.cols;
        let mut grad = Matrix::zeros(logits.rows, c);
        if !mask[k] || n_labeled == 0 {
            per_level.push(0.0);
            logit_grads.push(grad);
            continue;
        }
        let mut probs = vec![0.0; c];
        let mut loss = 0.0;
        let scale = 1.0 / (n_labeled as f64 * n_levels as f64);
        for (i, &y) in labels.iter().enumerate() {
            if y == IGNORE_LABEL {
                continue;
            }
            let j = chains[k][i] as usize;
            softmax_into(logits.row(j), &mut probs);
            let p = probs[y as usize].clamp(crate::losses::PROB_EPS, 1.0);
            loss -= p.ln();
            let g = grad.row_mut(j);
            for (kk, gk) in g.iter_mut().enumerate() {
                let t = if kk == y as usize { 1.0 } else { 0.0 };
                *gk += (probs[kk] - t) * scale;
            }
        }
        per_level.push(loss / n_labeled as f64);
        logit_grads.push(grad);
    }
    let total = per_level.iter().sum::<f64>() / n_levels as f64;
    Ok(ReasoningLoss { total, per_level, logit_grads })
}

/// Forward pass, all losses, and the full parameter gradient for one scene.
pub fn scene_loss_and_grads(
    params: &NetworkParams,
    h: &Hierarchy,
    input: &Matrix,
    labels: &[i32],
    targets: &TargetSet,
    config: &TrainConfig,
) -> Result<(LossReport, NetworkParams, ForwardOutput)> {
    let (out, cache) = forward(params, h, input)?;
    let levels = h.level_count();
    let mask = config.head_mask(levels);

    let ce = semantic_ce(&out.final_probs, labels)?;

    let reasoning = if config.lambda1 > 0.0 {
        match targets {
            TargetSet::Codes(stack) => reasoning_loss(&out.level_probs, stack, &mask)?,
            TargetSet::Ovu(chains) => ovu_loss(&out.level_logits, chains, labels, &mask)?,
        }
    } else {
        ReasoningLoss {
            total: 0.0,
            per_level: vec![0.0; levels - 1],
            logit_grads: out
                .level_probs
                .iter()
                .map(|m| Matrix::zeros(m.rows, m.cols))
                .collect(),
        }
    };

    let fd = if config.fd_enabled && config.lambda2 > 0.0 {
        Some(fd_loss(&out.fd_features)?)
    } else {
        None
    };

    let report = total_loss(ce.loss, &reasoning, fd.as_ref(), config.lambda1, config.lambda2);

    let level_logit_grads: Vec<Matrix> = reasoning
        .logit_grads
        .iter()
        .map(|m| {
            let mut g = m.clone();
            g.data.iter_mut().for_each(|v| *v *= config.lambda1);
            g
        })
        .collect();
    let fd_grads = fd.as_ref().map(|f| {
        f.grads
            .iter()
            .map(|m| {
                let mut g = m.clone();
                g.data.iter_mut().for_each(|v| *v *= config.lambda2);
                g
            })
            .collect::<Vec<_>>()
    });
    let grads = backward(
        params,
        h,
        &cache,
        &LossGrads {
            final_logits: ce.logit_grads,
            level_logits: level_logit_grads,
            fd_features: fd_grads,
        },
    )?;
    Ok((report, grads, out))
}

/// Classic momentum state for SGD.
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: Vec<f64>,
}

impl SgdState {
    pub fn new(params: &NetworkParams) -> Self {
        Self { velocity: vec![0.0; params.param_count()] }
    }
}

/// `v = momentum * v + g; p = p - lr * v`.
pub fn sgd_step(
    params: &mut NetworkParams,
    grads: &NetworkParams,
    lr: f64,
    momentum: f64,
    state: &mut SgdState,
) -> Result<()> {
    let g = grads.flatten();
    if g.len() != state.velocity.len() || g.len() != params.param_count() {
        return Err(Error::Contract("parameter/gradient shape mismatch".into()));
    }
    let mut flat = params.flatten();
    for ((p, v), &gi) in flat.iter_mut().zip(&mut state.velocity).zip(&g) {
        *v = momentum * *v + gi;
        *p -= lr * *v;
    }
    params.assign_flat(&flat)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub semantic: f64,
    pub reasoning: f64,
    pub densification: f64,
    pub total: f64,
    pub val_miou: f64,
    pub rfcc_oa: f64,
    pub train_accuracy: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
}

impl TrainRecord {
    /// Metrics CSV; wall-clock is deliberately excluded so reruns with the
    /// same seed produce byte-identical files.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,L_S,L_R,L_F,total,miou,rfcc_oa\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.epoch, e.semantic, e.reasoning, e.densification, e.total, e.val_miou,
                e.rfcc_oa
            ));
        }
        s
    }

    pub fn final_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// One prepared scene: geometry, input features, labels, and targets.
struct PreparedScene {
    hierarchy: Hierarchy,
    input: Matrix,
    labels: Vec<i32>,
    targets: TargetSet,
    /// Multi-hot codes kept for metric reporting in every mode.
    metric_codes: RfccStack,
}

fn prepare_scenes(
    scenes: &[PointCloud],
    hcfg: &HierarchyConfig,
    class_count: usize,
    config: &TrainConfig,
    level_cap: Option<usize>,
) -> Result<(Vec<PreparedScene>, usize)> {
    let mut hierarchies = Vec::with_capacity(scenes.len());
    for scene in scenes {
        hierarchies.push(build_hierarchy(scene, hcfg)?);
    }
    let mut levels = hierarchies.iter().map(|h| h.level_count()).min().unwrap();
    if let Some(cap) = level_cap {
        levels = levels.min(cap);
    }
    if levels < 2 {
        return Err(Error::InvalidInput("hierarchy collapsed below 2 levels".into()));
    }
    let mut prepared = Vec::with_capacity(scenes.len());
    for (scene, mut h) in scenes.iter().zip(hierarchies) {
        h.truncate(levels);
        let targets = make_targets(&h, &scene.labels, class_count, config)?;
        let metric_codes = gen_targets(&h, &scene.labels, class_count)?;
        prepared.push(PreparedScene {
            input: input_features(&scene.positions),
            labels: scene.labels.clone(),
            targets,
            metric_codes,
            hierarchy: h,
        });
    }
    Ok((prepared, levels))
}

/// Network widths used by the synthetic benchmark runs.
pub fn network_config_for(levels: usize, class_count: usize, config: &TrainConfig) -> NetworkConfig {
    let mut ncfg = NetworkConfig::with_levels(levels, class_count);
    ncfg.head_side = config.head_side;
    ncfg.fd_attachment = config.fd_attachment;
    ncfg
}

pub struct TrainOutcome {
    pub params: NetworkParams,
    pub record: TrainRecord,
    pub levels: usize,
}

/// Full training run. Deterministic for a fixed seed: scene order, batch
/// grouping, and all reductions are sequential and fixed.
pub fn train(
    train_scenes: &[PointCloud],
    val_scenes: &[PointCloud],
    hcfg: &HierarchyConfig,
    net_template: Option<&NetworkConfig>,
    config: &TrainConfig,
    class_count: usize,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_scenes.is_empty() {
        return Err(Error::InvalidArgument("empty training split".into()));
    }
    let cap = net_template.map(|n| n.levels());
    let (train_prep, levels) =
        prepare_scenes(train_scenes, hcfg, class_count, config, cap)?;
    let (val_prep, _) =
        prepare_scenes(val_scenes, hcfg, class_count, config, Some(levels))?;

    let ncfg = match net_template {
        Some(t) if t.levels() == levels => {
            let mut t = t.clone();
            t.head_side = config.head_side;
            t.fd_attachment = config.fd_attachment;
            t
        }
        Some(t) => {
            let mut t2 = t.clone();
            t2.encoder_widths.truncate(levels);
            t2.decoder_widths.truncate(levels);
            t2.head_side = config.head_side;
            t2.fd_attachment = config.fd_attachment;
            t2
        }
        None => network_config_for(levels, class_count, config),
    };
    let mut params = init_params(&ncfg, config.seed)?;
    let mut state = SgdState::new(&params);
    let mut record = TrainRecord::default();
    let started = Instant::now();

    for epoch in 0..config.epochs {
        let lr = config.learning_rate * config.lr_decay.powi(epoch as i32);
        let mut epoch_report: Option<LossReport> = None;
        let mut scene_count = 0usize;
        let mut correct = 0u64;
        let mut labelled = 0u64;
        for batch in train_prep.chunks(config.batch_size) {
            let mut batch_grads: Option<NetworkParams> = None;
            for scene in batch {
                let (report, grads, out) = scene_loss_and_grads(
                    &params,
                    &scene.hierarchy,
                    &scene.input,
                    &scene.labels,
                    &scene.targets,
                    config,
                )?;
                if !report.total.is_finite() || report.total > DIVERGENCE_LIMIT {
                    return Err(Error::Diverged(format!(
                        "total loss {} at epoch {epoch}",
                        report.total
                    )));
                }
                match &mut batch_grads {
                    None => batch_grads = Some(grads),
                    Some(acc) => acc.zip_apply(&grads, |a, b| a + b),
                }
                match &mut epoch_report {
                    None => epoch_report = Some(report),
                    Some(acc) => {
                        acc.semantic += report.semantic;
                        acc.reasoning += report.reasoning;
                        acc.densification += report.densification;
                        acc.total += report.total;
                    }
                }
                let preds = predict_labels(&out.final_probs);
                for (&t, &p) in scene.labels.iter().zip(&preds) {
                    if t == IGNORE_LABEL {
                        continue;
                    }
                    if t == p {
                        correct += 1;
                    }
                    labelled += 1;
                }
                scene_count += 1;
            }
            if let Some(mut grads) = batch_grads {
                let inv = 1.0 / batch.len() as f64;
                grads.zip_apply(&grads.clone(), |a, _| a * inv);
                sgd_step(&mut params, &grads, lr, config.momentum, &mut state)?;
            }
        }
        let mut report = epoch_report.expect("non-empty training split");
        let inv = 1.0 / scene_count as f64;
        report.semantic *= inv;
        report.reasoning *= inv;
        report.densification *= inv;
        report.total *= inv;

        let (val_miou, rfcc_oa) = evaluate_prepared(&params, &val_prep, class_count)?;
        // Accuracy is accumulated from the training-pass forward outputs, so it
        // reflects the parameters as they evolved across the epoch rather than a
        // second full pass with the end-of-epoch parameters.
        let train_accuracy =
            if labelled == 0 { 0.0 } else { correct as f64 / labelled as f64 };
        record.epochs.push(EpochRecord {
            epoch,
            semantic: report.semantic,
            reasoning: report.reasoning,
            densification: report.densification,
            total: report.total,
            val_miou,
            rfcc_oa,
            train_accuracy,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome { params, record, levels })
}

fn evaluate_prepared(
    params: &NetworkParams,
    scenes: &[PreparedScene],
    class_count: usize,
) -> Result<(f64, f64)> {
    if scenes.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut cm = ConfusionMatrix::new(class_count);
    let mut oa_num = 0.0;
    let mut oa_den = 0.0;
    for scene in scenes {
        let (out, _) = forward(params, &scene.hierarchy, &scene.input)?;
        let preds = predict_labels(&out.final_probs);
        cm.add(&scene.labels, &preds)?;
        let mask = vec![true; out.level_probs.len()];
        let oa = rfcc_accuracy(&out.level_probs, &scene.metric_codes, 0.5, &mask)?;
        let bits: usize = out.level_probs.iter().map(|m| m.rows * m.cols).sum();
        oa_num += oa * bits as f64;
        oa_den += bits as f64;
    }
    let miou_value = match miou(&cm) {
        Ok((_, m)) => m,
        Err(_) => 0.0,
    };
    Ok((miou_value, oa_num / oa_den))
}
