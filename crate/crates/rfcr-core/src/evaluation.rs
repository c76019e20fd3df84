//! Segmentation metrics (confusion matrix, per-class IoU), code-prediction
//! accuracy, and feature-magnitude statistics.

use crate::error::{Error, Result};
use crate::geometry::IGNORE_LABEL;
use crate::mat::Matrix;
use crate::rfcc::RfccStack;

/// Row = ground truth, column = prediction; IGNORE points are skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub class_count: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(class_count: usize) -> Self {
        Self { class_count, counts: vec![0; class_count * class_count] }
    }

    pub fn add(&mut self, truth: &[i32], predicted: &[i32]) -> Result<()> {
        if truth.len() != predicted.len() {
            return Err(Error::InvalidArgument("length mismatch in confusion update".into()));
        }
        for (&t, &p) in truth.iter().zip(predicted) {
            if t == IGNORE_LABEL {
                continue;
            }
            let (t, p) = (t as usize, p as usize);
            if t >= self.class_count || p >= self.class_count {
                return Err(Error::InvalidInput(format!("label out of range: {t}/{p}")));
            }
            self.counts[t * self.class_count + p] += 1;
        }
        Ok(())
    }

    pub fn count(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.class_count + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Per-class IoU (None where the class never appears in truth or prediction)
/// and the mean over defined classes.
pub fn miou(cm: &ConfusionMatrix) -> Result<(Vec<Option<f64>>, f64)> {
    let c = cm.class_count;
    let mut per_class = Vec::with_capacity(c);
    let mut sum = 0.0;
    let mut defined = 0usize;
    for k in 0..c {
        let tp = cm.count(k, k);
        let fp: u64 = (0..c).filter(|&t| t != k).map(|t| cm.count(t, k)).sum();
        let fn_: u64 = (0..c).filter(|&p| p != k).map(|p| cm.count(k, p)).sum();
        let denom = tp + fp + fn_;
        if denom == 0 {
            per_class.push(None);
        } else {
            let iou = tp as f64 / denom as f64;
            per_class.push(Some(iou));
            sum += iou;
            defined += 1;
        }
    }
    if defined == 0 {
        return Err(Error::InvalidInput("no class has a defined IoU".into()));
    }
    Ok((per_class, sum / defined as f64))
}

/// Fraction of (level, point, class) bits where the thresholded prediction
/// matches the target, over levels enabled in `mask` (index k = hierarchy
/// level k+1).
pub fn rfcc_accuracy(
    level_probs: &[Matrix],
    targets: &RfccStack,
    threshold: f64,
    mask: &[bool],
) -> Result<f64> {
    if targets.levels.len() != level_probs.len() + 1 || mask.len() != level_probs.len() {
        return Err(Error::InvalidArgument("level count mismatch in rfcc_accuracy".into()));
    }
    let c = targets.class_count;
    let mut correct = 0u64;
    let mut total = 0u64;
    for (k, probs) in level_probs.iter().enumerate() {
        if !mask[k] {
            continue;
        }
        let codes = &targets.levels[k + 1];
        if probs.rows != codes.rows || probs.cols != c {
            return Err(Error::InvalidArgument(format!(
                "shape mismatch at level {}",
                k + 1
            )));
        }
        for i in 0..probs.rows {
            for kk in 0..c {
                let pred = probs.get(i, kk) >= threshold;
                if pred == codes.get(i, kk) {
                    correct += 1;
                }
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::InvalidArgument("no supervised level in rfcc_accuracy".into()));
    }
    Ok(correct as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeHistogram {
    pub edges: Vec<f64>,
    /// One count vector per level; the final bin catches values above the
    /// last edge.
    pub counts: Vec<Vec<u64>>,
}

impl MagnitudeHistogram {
    pub fn level_total(&self, level: usize) -> u64 {
        self.counts[level].iter().sum()
    }
}

/// Histograms |value| per level over the given ascending bin edges.
pub fn magnitude_histogram(features: &[Matrix], edges: &[f64]) -> Result<MagnitudeHistogram> {
    if features.is_empty() {
        return Err(Error::InvalidArgument("no feature levels".into()));
    }
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("bin edges must be strictly ascending".into()));
    }
    let mut counts = Vec::with_capacity(features.len());
    for m in features {
        let mut bins = vec![0u64; edges.len()];
        for &v in &m.data {
            bins[edge_bin(edges, v.abs())] += 1;
        }
        counts.push(bins);
    }
    Ok(MagnitudeHistogram { edges: edges.to_vec(), counts })
}

fn edge_bin(edges: &[f64], a: f64) -> usize {
    // Bin i covers [edges[i], edges[i+1]); the last bin is unbounded above,
    // values below edges[0] land in bin 0.
    match edges.iter().rposition(|&e| a >= e) {
        None => 0,
        Some(i) => i.min(edges.len() - 1),
    }
}

/// Fraction of feature entries with |value| below `threshold`, over all levels.
pub fn small_magnitude_fraction(features: &[Matrix], threshold: f64) -> f64 {
    let mut below = 0u64;
    let mut total = 0u64;
    for m in features {
        for &v in &m.data {
            if v.abs() < threshold {
                below += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        below as f64 / total as f64
    }
}
