//! Scalar objectives and their analytic gradients: multi-hot code BCE with
//! per-level averaging, the centrifugal feature-densification potential, the
//! semantic cross entropy, and the weighted total.

use crate::error::{Error, Result};
use crate::geometry::IGNORE_LABEL;
use crate::mat::Matrix;
use crate::rfcc::RfccStack;

/// Probabilities are clamped to [PROB_EPS, 1 - PROB_EPS] before any log.
pub const PROB_EPS: f64 = 1e-7;

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Breakdown of one total-loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub semantic: f64,
    pub reasoning: f64,
    pub reasoning_per_level: Vec<f64>,
    pub densification: f64,
    pub densification_per_level: Vec<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub total: f64,
}

/// Channel-mean binary cross entropy of one predicted code against its
/// multi-hot target, plus the gradient w.r.t. the pre-sigmoid logits.
pub fn rfcc_bce(pred: &[f64], target: &[bool]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::InvalidArgument(format!(
            "prediction width {} vs target width {}",
            pred.len(),
            target.len()
        )));
    }
    let c = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &g) in pred.iter().zip(target) {
        if !p.is_finite() {
            return Err(Error::Numeric("non-finite prediction in rfcc_bce".into()));
        }
        let pc = clamp_prob(p);
        let t = if g { 1.0 } else { 0.0 };
        loss -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        grad.push((p - t) / c);
    }
    Ok((loss / c, grad))
}

/// Reasoning loss over decoder levels and the gradient of the aggregate
/// w.r.t. each level's head logits.
#[derive(Debug, Clone)]
pub struct ReasoningLoss {
    pub total: f64,
    pub per_level: Vec<f64>,
    pub logit_grads: Vec<Matrix>,
}

/// Averages per-code BCE over the points of each supervised level, then over
/// the `L - 1` decoder levels. `level_probs[k]` holds predictions for
/// hierarchy level `k + 1`; masked-off levels contribute zero but the
/// divisor stays `L - 1`.
pub fn reasoning_loss(
    level_probs: &[Matrix],
    targets: &RfccStack,
    mask: &[bool],
) -> Result<ReasoningLoss> {
    let n_levels = level_probs.len();
    if targets.levels.len() != n_levels + 1 {
        return Err(Error::InvalidArgument(format!(
            "{} prediction levels vs {} target levels",
            n_levels,
            targets.levels.len()
        )));
    }
    if mask.len() != n_levels {
        return Err(Error::InvalidArgument("supervision mask length mismatch".into()));
    }
    let c = targets.class_count;
    let mut per_level = Vec::with_capacity(n_levels);
    let mut logit_grads = Vec::with_capacity(n_levels);
    let mut target_buf = vec![false; c];
    for (k, probs) in level_probs.iter().enumerate() {
        let codes = &targets.levels[k + 1];
        if probs.rows != codes.rows || probs.cols != c {
            return Err(Error::InvalidArgument(format!(
                "level {} shape mismatch: preds {}x{}, targets {}x{}",
                k + 1,
                probs.rows,
                probs.cols,
                codes.rows,
                c
            )));
        }
        let mut grad = Matrix::zeros(probs.rows, c);
        if !mask[k] || probs.rows == 0 {
            per_level.push(0.0);
            logit_grads.push(grad);
            continue;
        }
        let scale = 1.0 / (probs.rows as f64 * n_levels as f64);
        let mut level_sum = 0.0;
        for i in 0..probs.rows {
            for (kk, t) in target_buf.iter_mut().enumerate() {
                *t = codes.get(i, kk);
            }
            let (l, g) = rfcc_bce(probs.row(i), &target_buf)?;
            level_sum += l;
            // rfcc_bce already divides by C; fold in the point and level means.
            for (dst, &gi) in grad.row_mut(i).iter_mut().zip(&g) {
                *dst = gi * scale;
            }
        }
        per_level.push(level_sum / probs.rows as f64);
        logit_grads.push(grad);
    }
    let total = per_level.iter().sum::<f64>() / n_levels as f64;
    Ok(ReasoningLoss { total, per_level, logit_grads })
}

/// Centrifugal potential and its derivative. `phi(x) = ln(1 + e^{-|x|})`,
/// derivative `-sign(x) * e^{-|x|} / (1 + e^{-|x|})`, zero at the origin.
pub fn centrifugal(x: f64) -> (f64, f64) {
    debug_assert!(x.is_finite());
    let e = (-x.abs()).exp();
    let phi = e.ln_1p();
    let grad = if x == 0.0 { 0.0 } else { -x.signum() * e / (1.0 + e) };
    (phi, grad)
}

#[derive(Debug, Clone)]
pub struct FdLoss {
    pub total: f64,
    pub per_level: Vec<f64>,
    pub grads: Vec<Matrix>,
}

/// Feature-densification loss: mean potential per level, averaged across
/// levels, with the gradient w.r.t. every feature entry.
pub fn fd_loss(features: &[Matrix]) -> Result<FdLoss> {
    if features.is_empty() {
        return Err(Error::InvalidArgument("fd_loss needs at least one level".into()));
    }
    let n_levels = features.len();
    let mut per_level = Vec::with_capacity(n_levels);
    let mut grads = Vec::with_capacity(n_levels);
    for m in features {
        if m.rows == 0 || m.cols == 0 {
            return Err(Error::InvalidArgument("empty feature level in fd_loss".into()));
        }
        if !m.is_finite() {
            return Err(Error::Numeric("non-finite feature in fd_loss".into()));
        }
        let mut grad = Matrix::zeros(m.rows, m.cols);
        let scale = 1.0 / (m.rows as f64 * m.cols as f64);
        let mut sum = 0.0;
        for (g, &v) in grad.data.iter_mut().zip(&m.data) {
            let (phi, d) = centrifugal(v);
            sum += phi;
            *g = d * scale / n_levels as f64;
        }
        per_level.push(sum * scale);
        grads.push(grad);
    }
    let total = per_level.iter().sum::<f64>() / n_levels as f64;
    Ok(FdLoss { total, per_level, grads })
}

#[derive(Debug, Clone)]
pub struct SemanticCe {
    pub loss: f64,
    /// Gradient w.r.t. the softmax logits, already divided by the labeled count.
    pub logit_grads: Matrix,
    /// Set when every point carries the IGNORE label.
    pub all_ignored: bool,
}

/// Mean cross entropy over labeled points; IGNORE points contribute neither
/// loss nor gradient.
pub fn semantic_ce(final_probs: &Matrix, labels: &[i32]) -> Result<SemanticCe> {
    if final_probs.rows != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} probability rows vs {} labels",
            final_probs.rows,
            labels.len()
        )));
    }
    let c = final_probs.cols;
    let n_labeled = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    let mut grads = Matrix::zeros(final_probs.rows, c);
    if n_labeled == 0 {
        return Ok(SemanticCe { loss: 0.0, logit_grads: grads, all_ignored: true });
    }
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y == IGNORE_LABEL {
            continue;
        }
        if y < 0 || y as usize >= c {
            return Err(Error::InvalidInput(format!("label {y} out of range at point {i}")));
        }
        let p = final_probs.row(i);
        loss -= clamp_prob(p[y as usize]).ln();
        let g = grads.row_mut(i);
        for (k, gk) in g.iter_mut().enumerate() {
            let t = if k == y as usize { 1.0 } else { 0.0 };
            *gk = (p[k] - t) / n_labeled as f64;
        }
    }
    Ok(SemanticCe { loss: loss / n_labeled as f64, logit_grads: grads, all_ignored: false })
}

/// Combines the three components with their weights into a report.
pub fn total_loss(
    semantic: f64,
    reasoning: &ReasoningLoss,
    densification: Option<&FdLoss>,
    lambda1: f64,
    lambda2: f64,
) -> LossReport {
    let (lf, lf_levels) = match densification {
        Some(fd) => (fd.total, fd.per_level.clone()),
        None => (0.0, Vec::new()),
    };
    let total = semantic + lambda1 * reasoning.total + lambda2 * lf;
    LossReport {
        semantic,
        reasoning: reasoning.total,
        reasoning_per_level: reasoning.per_level.clone(),
        densification: lf,
        densification_per_level: lf_levels,
        lambda1,
        lambda2,
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rfcc::init_codes;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn sigmoid(z: f64) -> f64 {
        1.0 / (1.0 + (-z).exp())
    }

    #[test]
    fn bce_half_probability() {
        let (loss, _) = rfcc_bce(&[0.5], &[true]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_perfect_prediction_near_floor() {
        let (loss, grad) = rfcc_bce(&[1.0], &[true]).unwrap();
        assert!(loss < 1e-6);
        assert!(grad[0].abs() < 1e-12);
        let (loss0, grad0) = rfcc_bce(&[0.0], &[false]).unwrap();
        assert!(loss0 < 1e-6);
        assert!(grad0[0].abs() < 1e-12);
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = 20;
        for _ in 0..20 {
            let logits: Vec<f64> = (0..c).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let target: Vec<bool> = (0..c).map(|_| rng.gen_bool(0.5)).collect();
            let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
            let (_, grad) = rfcc_bce(&probs, &target).unwrap();
            let h = 1e-5;
            for k in 0..c {
                let mut zp = logits.clone();
                let mut zm = logits.clone();
                zp[k] += h;
                zm[k] -= h;
                let pp: Vec<f64> = zp.iter().map(|&z| sigmoid(z)).collect();
                let pm: Vec<f64> = zm.iter().map(|&z| sigmoid(z)).collect();
                let (lp, _) = rfcc_bce(&pp, &target).unwrap();
                let (lm, _) = rfcc_bce(&pm, &target).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                let rel = (grad[k] - fd).abs() / fd.abs().max(1e-8);
                assert!(rel < 1e-6, "channel {k}: analytic {} fd {}", grad[k], fd);
            }
        }
    }

    fn single_level_targets(labels: &[i32], c: usize) -> RfccStack {
        // Level 0 unused by reasoning_loss; reuse the same codes at level 1.
        let codes = init_codes(labels, c).unwrap();
        RfccStack { class_count: c, levels: vec![codes.clone(), codes] }
    }

    #[test]
    fn reasoning_single_level_equals_level_loss() {
        let targets = single_level_targets(&[1, 0], 3);
        let probs = Matrix::from_rows(vec![vec![0.2, 0.9, 0.1], vec![0.7, 0.3, 0.2]]);
        let r = reasoning_loss(&[probs.clone()], &targets, &[true]).unwrap();
        assert!((r.total - r.per_level[0]).abs() < 1e-15);
        // Direct oracle: average of per-point bce.
        let (l0, _) = rfcc_bce(probs.row(0), &[false, true, false]).unwrap();
        let (l1, _) = rfcc_bce(probs.row(1), &[true, false, false]).unwrap();
        assert!((r.total - (l0 + l1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn reasoning_all_masked_is_zero() {
        let targets = single_level_targets(&[1], 3);
        let probs = Matrix::from_rows(vec![vec![0.2, 0.9, 0.1]]);
        let r = reasoning_loss(&[probs], &targets, &[false]).unwrap();
        assert_eq!(r.total, 0.0);
        assert!(r.logit_grads[0].data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn reasoning_matches_independent_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = 4;
        let sizes = [12usize, 7, 3];
        let mut levels = vec![init_codes(&vec![0; 20], c).unwrap()];
        let mut probs = Vec::new();
        let mut bools = Vec::new();
        for &n in &sizes {
            let mut codes = crate::rfcc::BitMatrix::zeros(n, c);
            let mut bb = vec![vec![false; c]; n];
            for i in 0..n {
                for k in 0..c {
                    if rng.gen_bool(0.5) {
                        codes.set(i, k);
                        bb[i][k] = true;
                    }
                }
            }
            levels.push(codes);
            bools.push(bb);
            probs.push(Matrix::from_rows(
                (0..n).map(|_| (0..c).map(|_| rng.gen_range(0.01..0.99)).collect()).collect(),
            ));
        }
        let targets = RfccStack { class_count: c, levels };
        let r = reasoning_loss(&probs, &targets, &[true, true, true]).unwrap();
        // Independent accumulation in a different order.
        let mut oracle = 0.0;
        for (k, p) in probs.iter().enumerate().rev() {
            let mut level = 0.0;
            for i in (0..p.rows).rev() {
                let (l, _) = rfcc_bce(p.row(i), &bools[k][i]).unwrap();
                level += l;
            }
            oracle += level / p.rows as f64;
        }
        oracle /= 3.0;
        assert!((r.total - oracle).abs() < 1e-10);
    }

    #[test]
    fn centrifugal_at_zero() {
        let (phi, g) = centrifugal(0.0);
        assert!((phi - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g, 0.0);
    }

    #[test]
    fn centrifugal_saturates() {
        let (phi, g) = centrifugal(40.0);
        assert!(phi < 1e-12);
        assert!(g.abs() < 1e-12);
        let (phi_n, g_n) = centrifugal(-40.0);
        assert!(phi_n < 1e-12);
        assert!(g_n.abs() < 1e-12);
    }

    #[test]
    fn centrifugal_equals_entropy_form_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let x: f64 = rng.gen_range(-5.0..5.0);
            let (phi, grad) = centrifugal(x);
            let s = sigmoid(x);
            let t = if x >= 0.0 { 1.0 } else { 0.0 };
            let entropy = -(t * s.ln() + (1.0 - t) * (1.0 - s).ln());
            assert!((phi - entropy).abs() < 1e-12, "x={x}");
            if x.abs() > 1e-3 {
                let h = 1e-6;
                let fd = (centrifugal(x + h).0 - centrifugal(x - h).0) / (2.0 * h);
                assert!((grad - fd).abs() < 1e-7, "x={x} grad={grad} fd={fd}");
            }
        }
    }

    #[test]
    fn fd_all_zero_features() {
        let m = Matrix::zeros(4, 3);
        let fd = fd_loss(&[m]).unwrap();
        assert!((fd.total - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn fd_saturated_features() {
        let mut m = Matrix::zeros(4, 3);
        m.data.iter_mut().for_each(|v| *v = 40.0);
        let fd = fd_loss(&[m]).unwrap();
        assert!(fd.total < 1e-12);
    }

    #[test]
    fn fd_matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mats: Vec<Matrix> = [(9usize, 4usize), (5, 6), (2, 3)]
            .iter()
            .map(|&(r, c)| {
                Matrix::from_rows(
                    (0..r).map(|_| (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect(),
                )
            })
            .collect();
        let fd = fd_loss(&mats).unwrap();
        let mut oracle = 0.0;
        for m in &mats {
            let mut level = 0.0;
            for i in 0..m.rows {
                for k in 0..m.cols {
                    level += centrifugal(m.get(i, k)).0;
                }
            }
            oracle += level / (m.rows * m.cols) as f64;
        }
        oracle /= mats.len() as f64;
        assert!((fd.total - oracle).abs() < 1e-10);
    }

    #[test]
    fn fd_rejects_empty_level() {
        assert!(fd_loss(&[Matrix::zeros(0, 3)]).is_err());
        assert!(fd_loss(&[]).is_err());
    }

    #[test]
    fn semantic_uniform_probs() {
        let c = 4;
        let probs = Matrix::from_rows(vec![vec![0.25; c]]);
        let ce = semantic_ce(&probs, &[2]).unwrap();
        assert!((ce.loss - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn semantic_perfect_probability() {
        let probs = Matrix::from_rows(vec![vec![0.0, 1.0, 0.0]]);
        let ce = semantic_ce(&probs, &[1]).unwrap();
        assert!(ce.loss.abs() < 1e-6);
    }

    #[test]
    fn semantic_all_ignore_flags() {
        let probs = Matrix::from_rows(vec![vec![0.5, 0.5]]);
        let ce = semantic_ce(&probs, &[IGNORE_LABEL]).unwrap();
        assert!(ce.all_ignored);
        assert_eq!(ce.loss, 0.0);
    }

    #[test]
    fn semantic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = 5;
        let n = 8;
        let logits: Vec<Vec<f64>> =
            (0..n).map(|_| (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let labels: Vec<i32> = (0..n)
            .map(|i| if i == 3 { IGNORE_LABEL } else { rng.gen_range(0..c as i32) })
            .collect();
        let softmax = |z: &[f64]| {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect::<Vec<f64>>()
        };
        let eval = |logits: &[Vec<f64>]| {
            let probs = Matrix::from_rows(logits.iter().map(|z| softmax(z)).collect());
            semantic_ce(&probs, &labels).unwrap().loss
        };
        let probs = Matrix::from_rows(logits.iter().map(|z| softmax(z)).collect());
        let ce = semantic_ce(&probs, &labels).unwrap();
        let h = 1e-5;
        for i in 0..n {
            for k in 0..c {
                let mut lp = logits.clone();
                let mut lm = logits.clone();
                lp[i][k] += h;
                lm[i][k] -= h;
                let fd = (eval(&lp) - eval(&lm)) / (2.0 * h);
                let g = ce.logit_grads.get(i, k);
                let denom = fd.abs().max(1e-6);
                assert!((g - fd).abs() / denom < 1e-5, "i={i} k={k} g={g} fd={fd}");
            }
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let r = ReasoningLoss { total: 2.0, per_level: vec![2.0], logit_grads: vec![] };
        let report = total_loss(1.0, &r, None, 1.0, 1.0);
        assert_eq!(report.total, 3.0);

        let fd = FdLoss { total: 0.125, per_level: vec![0.125], grads: vec![] };
        let r2 = ReasoningLoss { total: 0.25, per_level: vec![0.25], logit_grads: vec![] };
        let report2 = total_loss(0.5, &r2, Some(&fd), 2.0, 4.0);
        assert!((report2.total - 1.5).abs() < 1e-15);

        let report3 = total_loss(0.7, &r, None, 0.0, 0.0);
        assert_eq!(report3.total, 0.7);
    }

    #[test]
    fn gradient_sign_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let x: f64 = rng.gen_range(-10.0..10.0);
            if x == 0.0 {
                continue;
            }
            let (_, g) = centrifugal(x);
            assert_eq!((-g).signum(), x.signum());
        }
        let mut prev = f64::INFINITY;
        for i in 1..=1000 {
            let x = i as f64 * 0.01;
            let (_, g) = centrifugal(x);
            assert!(g.abs() < prev);
            prev = g.abs();
        }
    }
}
