//! Micro encoder-decoder point network: shared-MLP set abstraction with max
//! pooling on the way down, nearest-point upsampling with skip links on the
//! way up, per-level sigmoid code heads and a softmax head at full
//! resolution. Reverse-mode gradients are hand-written against the cached
//! activations and verified against finite differences in the tests.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hierarchy::Hierarchy;
use crate::mat::{leaky_relu, leaky_relu_grad, Linear, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSide {
    Decoder,
    Encoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdAttachment {
    Identity,
    Perceptron,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Feature width per hierarchy level, encoder side.
    pub encoder_widths: Vec<usize>,
    /// Feature width per hierarchy level, decoder side.
    pub decoder_widths: Vec<usize>,
    pub head_hidden: usize,
    /// Per-point input features; default is constant 1 plus height.
    pub input_dim: usize,
    pub leaky_slope: f64,
    pub class_count: usize,
    pub head_side: HeadSide,
    pub fd_attachment: FdAttachment,
}

impl NetworkConfig {
    pub fn with_levels(levels: usize, class_count: usize) -> Self {
        Self {
            encoder_widths: default_widths(levels, &[16, 24, 32, 48, 64]),
            decoder_widths: default_widths(levels, &[16, 24, 32, 48, 64]),
            head_hidden: 16,
            input_dim: 2,
            leaky_slope: 0.1,
            class_count,
            head_side: HeadSide::Decoder,
            fd_attachment: FdAttachment::Identity,
        }
    }

    pub fn levels(&self) -> usize {
        self.encoder_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.len() != self.decoder_widths.len() {
            return Err(Error::InvalidArgument(
                "encoder and decoder width lists must have equal length".into(),
            ));
        }
        if self.encoder_widths.len() < 2 {
            return Err(Error::InvalidArgument("network needs at least 2 levels".into()));
        }
        if self.encoder_widths.iter().chain(&self.decoder_widths).any(|&w| w == 0) {
            return Err(Error::InvalidArgument("feature widths must be >= 1".into()));
        }
        if self.head_hidden == 0 || self.input_dim == 0 || self.class_count < 2 {
            return Err(Error::InvalidArgument("invalid head/input/class configuration".into()));
        }
        Ok(())
    }
}

fn default_widths(levels: usize, table: &[usize]) -> Vec<usize> {
    (0..levels).map(|l| table[l.min(table.len() - 1)]).collect()
}

/// Two-layer prediction head: linear, leaky ReLU, linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub hidden: Linear,
    pub output: Linear,
}

impl Head {
    fn zeros(in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self { hidden: Linear::zeros(hidden, in_dim), output: Linear::zeros(out_dim, hidden) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub config: NetworkConfig,
    pub encoder: Vec<Linear>,
    pub decoder: Vec<Linear>,
    /// Code heads for levels 1..L-1 (index k supervises hierarchy level k+1).
    pub heads: Vec<Head>,
    pub final_head: Head,
    /// Per-level feature-densification perceptrons, empty for identity.
    pub fd_layers: Vec<Linear>,
}

impl NetworkParams {
    fn linears(&self) -> Vec<&Linear> {
        let mut v: Vec<&Linear> = Vec::new();
        v.extend(self.encoder.iter());
        v.extend(self.decoder.iter());
        for h in &self.heads {
            v.push(&h.hidden);
            v.push(&h.output);
        }
        v.push(&self.final_head.hidden);
        v.push(&self.final_head.output);
        v.extend(self.fd_layers.iter());
        v
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut v: Vec<&mut Linear> = Vec::new();
        v.extend(self.encoder.iter_mut());
        v.extend(self.decoder.iter_mut());
        for h in &mut self.heads {
            v.push(&mut h.hidden);
            v.push(&mut h.output);
        }
        v.push(&mut self.final_head.hidden);
        v.push(&mut self.final_head.output);
        v.extend(self.fd_layers.iter_mut());
        v
    }

    /// All parameters in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in self.linears() {
            out.extend_from_slice(&l.weight.data);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let mut offset = 0;
        for l in self.linears_mut() {
            let wn = l.weight.data.len();
            let bn = l.bias.len();
            if offset + wn + bn > flat.len() {
                return Err(Error::Contract("flat parameter vector too short".into()));
            }
            l.weight.data.copy_from_slice(&flat[offset..offset + wn]);
            offset += wn;
            l.bias.copy_from_slice(&flat[offset..offset + bn]);
            offset += bn;
        }
        if offset != flat.len() {
            return Err(Error::Contract("flat parameter vector too long".into()));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for l in out.linears_mut() {
            l.weight.data.iter_mut().for_each(|v| *v = 0.0);
            l.bias.iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.linears().iter().map(|l| l.weight.data.len() + l.bias.len()).sum()
    }

    /// Applies `p[i] = f(p[i], other[i])` element-wise over both parameter sets.
    pub fn zip_apply(&mut self, other: &Self, mut f: impl FnMut(f64, f64) -> f64) {
        let flat_other = other.flatten();
        let mut flat: Vec<f64> = self.flatten();
        for (a, &b) in flat.iter_mut().zip(&flat_other) {
            *a = f(*a, b);
        }
        self.assign_flat(&flat).expect("shapes match");
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for l in self.linears() {
            for &v in &l.weight.data {
                v.to_bits().hash(&mut h);
            }
            for &v in &l.bias {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Deterministic fan-in-scaled uniform initialization, zero biases.
pub fn init_params(config: &NetworkConfig, seed: u64) -> Result<NetworkParams> {
    config.validate()?;
    let levels = config.levels();
    let ew = &config.encoder_widths;
    let dw = &config.decoder_widths;
    let c = config.class_count;

    let mut encoder = vec![Linear::zeros(ew[0], config.input_dim)];
    for l in 1..levels {
        encoder.push(Linear::zeros(ew[l], ew[l - 1] + 3));
    }
    let mut decoder = Vec::with_capacity(levels);
    for l in 0..levels {
        let in_dim = if l == levels - 1 { ew[l] } else { dw[l + 1] + ew[l] };
        decoder.push(Linear::zeros(dw[l], in_dim));
    }
    let mut heads = Vec::with_capacity(levels - 1);
    for l in 1..levels {
        let in_dim = match config.head_side {
            HeadSide::Decoder => dw[l],
            HeadSide::Encoder => ew[l],
        };
        heads.push(Head::zeros(in_dim, config.head_hidden, c));
    }
    let final_head = Head::zeros(dw[0], config.head_hidden, c);
    let fd_layers = match config.fd_attachment {
        FdAttachment::Identity => Vec::new(),
        FdAttachment::Perceptron => (1..levels).map(|l| Linear::zeros(dw[l], dw[l])).collect(),
    };

    let mut params = NetworkParams {
        config: config.clone(),
        encoder,
        decoder,
        heads,
        final_head,
        fd_layers,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in params.linears_mut() {
        let bound = (1.0 / l.in_dim() as f64).sqrt();
        for w in l.weight.data.iter_mut() {
            *w = rng.gen_range(-bound..bound);
        }
        // biases stay zero
    }
    Ok(params)
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Encoder skip features per level.
    pub alpha: Vec<Matrix>,
    /// Decoder features per level.
    pub beta: Vec<Matrix>,
    /// Sigmoid code predictions, index k for hierarchy level k+1.
    pub level_probs: Vec<Matrix>,
    /// Head pre-sigmoid logits, same indexing.
    pub level_logits: Vec<Matrix>,
    /// Softmax class probabilities at full resolution.
    pub final_probs: Matrix,
    /// Pre-activation features feeding the densification loss, index k for
    /// hierarchy level k+1.
    pub fd_features: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct ActivationCache {
    fingerprint: u64,
    input: Matrix,
    enc_pre: Vec<Matrix>,
    alpha: Vec<Matrix>,
    /// Winning support index per (point, channel) for each pooled level.
    pool_argmax: Vec<Vec<u32>>,
    dec_pre: Vec<Matrix>,
    beta: Vec<Matrix>,
    head_hidden_pre: Vec<Matrix>,
    final_hidden_pre: Matrix,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(z: &[f64], out: &mut [f64]) {
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

/// Default per-point input: constant one plus the absolute height coordinate.
pub fn input_features(positions: &[[f64; 3]]) -> Matrix {
    Matrix::from_rows(positions.iter().map(|p| vec![1.0, p[2]]).collect())
}

fn apply_head(
    head: &Head,
    input: &Matrix,
    slope: f64,
) -> (Matrix, Matrix) {
    // Returns (hidden_pre, logits).
    let hidden_pre = head.hidden.apply_rows(input);
    let mut hidden_post = hidden_pre.clone();
    hidden_post.data.iter_mut().for_each(|v| *v = leaky_relu(*v, slope));
    let logits = head.output.apply_rows(&hidden_post);
    (hidden_pre, logits)
}

pub fn forward(
    params: &NetworkParams,
    h: &Hierarchy,
    input: &Matrix,
) -> Result<(ForwardOutput, ActivationCache)> {
    let cfg = &params.config;
    let levels = cfg.levels();
    if h.level_count() != levels {
        return Err(Error::InvalidArgument(format!(
            "network built for {} levels, hierarchy has {}",
            levels,
            h.level_count()
        )));
    }
    if input.rows != h.point_count(0) || input.cols != cfg.input_dim {
        return Err(Error::InvalidArgument(format!(
            "input features {}x{} do not match {} points x {} dims",
            input.rows,
            input.cols,
            h.point_count(0),
            cfg.input_dim
        )));
    }
    let slope = cfg.leaky_slope;

    // Encoder.
    let mut enc_pre = Vec::with_capacity(levels);
    let mut alpha = Vec::with_capacity(levels);
    let mut pool_argmax = Vec::with_capacity(levels);
    let pre0 = params.encoder[0].apply_rows(input);
    let mut a0 = pre0.clone();
    a0.data.iter_mut().for_each(|v| *v = leaky_relu(*v, slope));
    enc_pre.push(pre0);
    alpha.push(a0);
    pool_argmax.push(Vec::new());
    for l in 1..levels {
        let layer = &params.encoder[l];
        let pool = h.levels[l].pool_neighbors.as_ref().unwrap();
        let n = h.point_count(l);
        let width = layer.out_dim();
        let prev_width = alpha[l - 1].cols;
        let mut pre = Matrix::zeros(n, width);
        let mut argmax = vec![0u32; n * width];
        let mut x = vec![0.0; prev_width + 3];
        let mut y = vec![0.0; width];
        for i in 0..n {
            let center = h.levels[l].positions[i];
            let mut best = vec![f64::NEG_INFINITY; width];
            let mut best_j = vec![0u32; width];
            for &j in &pool.lists[i] {
                let jp = j as usize;
                x[..prev_width].copy_from_slice(alpha[l - 1].row(jp));
                let sp = h.levels[l - 1].positions[jp];
                x[prev_width] = sp[0] - center[0];
                x[prev_width + 1] = sp[1] - center[1];
                x[prev_width + 2] = sp[2] - center[2];
                layer.apply_into(&x, &mut y);
                for (c, &v) in y.iter().enumerate() {
                    if v > best[c] {
                        best[c] = v;
                        best_j[c] = j;
                    }
                }
            }
            pre.row_mut(i).copy_from_slice(&best);
            argmax[i * width..(i + 1) * width].copy_from_slice(&best_j);
        }
        let mut act = pre.clone();
        act.data.iter_mut().for_each(|v| *v = leaky_relu(*v, slope));
        enc_pre.push(pre);
        alpha.push(act);
        pool_argmax.push(argmax);
    }

    // Decoder, top level down.
    let mut dec_pre: Vec<Option<Matrix>> = vec![None; levels];
    let mut beta: Vec<Option<Matrix>> = vec![None; levels];
    for l in (0..levels).rev() {
        let layer = &params.decoder[l];
        let pre = if l == levels - 1 {
            layer.apply_rows(&alpha[l])
        } else {
            let up_map = h.levels[l + 1].upsample_map.as_ref().unwrap();
            let upper = beta[l + 1].as_ref().unwrap();
            let n = h.point_count(l);
            let mut x = Matrix::zeros(n, upper.cols + alpha[l].cols);
            for i in 0..n {
                let u = up_map[i] as usize;
                let row = x.row_mut(i);
                row[..upper.cols].copy_from_slice(upper.row(u));
                row[upper.cols..].copy_from_slice(alpha[l].row(i));
            }
            layer.apply_rows(&x)
        };
        let mut act = pre.clone();
        act.data.iter_mut().for_each(|v| *v = leaky_relu(*v, slope));
        dec_pre[l] = Some(pre);
        beta[l] = Some(act);
    }
    let dec_pre: Vec<Matrix> = dec_pre.into_iter().map(Option::unwrap).collect();
    let beta: Vec<Matrix> = beta.into_iter().map(Option::unwrap).collect();

    // Code heads.
    let mut level_probs = Vec::with_capacity(levels - 1);
    let mut level_logits = Vec::with_capacity(levels - 1);
    let mut head_hidden_pre = Vec::with_capacity(levels - 1);
    for l in 1..levels {
        let head_input = match cfg.head_side {
            HeadSide::Decoder => &beta[l],
            HeadSide::Encoder => &alpha[l],
        };
        let (hp, logits) = apply_head(&params.heads[l - 1], head_input, slope);
        let mut probs = logits.clone();
        probs.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        head_hidden_pre.push(hp);
        level_probs.push(probs);
        level_logits.push(logits);
    }

    // Final softmax head.
    let (final_hidden_pre, final_logits) = apply_head(&params.final_head, &beta[0], slope);
    let mut final_probs = Matrix::zeros(final_logits.rows, final_logits.cols);
    for i in 0..final_logits.rows {
        let mut row = vec![0.0; final_logits.cols];
        softmax_row(final_logits.row(i), &mut row);
        final_probs.row_mut(i).copy_from_slice(&row);
    }

    // Densification features.
    let fd_features: Vec<Matrix> = match cfg.fd_attachment {
        FdAttachment::Identity => dec_pre[1..].to_vec(),
        FdAttachment::Perceptron => (1..levels)
            .map(|l| params.fd_layers[l - 1].apply_rows(&beta[l]))
            .collect(),
    };

    let output = ForwardOutput {
        alpha: alpha.clone(),
        beta: beta.clone(),
        level_probs: level_probs.clone(),
        level_logits,
        final_probs,
        fd_features,
    };
    let cache = ActivationCache {
        fingerprint: params.fingerprint(),
        input: input.clone(),
        enc_pre,
        alpha,
        pool_argmax,
        dec_pre,
        beta,
        head_hidden_pre,
        final_hidden_pre,
    };
    Ok((output, cache))
}

/// Loss gradients handed to `backward`: derivatives of the (already
/// weighted) total loss at each supervised surface.
#[derive(Debug, Clone)]
pub struct LossGrads {
    /// d total / d final softmax logits.
    pub final_logits: Matrix,
    /// d total / d head logits, index k for hierarchy level k+1.
    pub level_logits: Vec<Matrix>,
    /// d total / d densification features, same indexing; None disables FD.
    pub fd_features: Option<Vec<Matrix>>,
}

fn head_backward(
    head: &Head,
    head_grad: &mut Head,
    input: &Matrix,
    hidden_pre: &Matrix,
    d_logits: &Matrix,
    slope: f64,
    d_input: &mut Matrix,
) {
    let hidden_dim = head.hidden.out_dim();
    let mut hidden_post = vec![0.0; hidden_dim];
    let mut d_hidden = vec![0.0; hidden_dim];
    for i in 0..input.rows {
        let dl = d_logits.row(i);
        if dl.iter().all(|&g| g == 0.0) {
            continue;
        }
        for (hp, &p) in hidden_post.iter_mut().zip(hidden_pre.row(i)) {
            *hp = leaky_relu(p, slope);
        }
        d_hidden.iter_mut().for_each(|v| *v = 0.0);
        head.output.backward_sample(&hidden_post, dl, &mut head_grad.output, Some(&mut d_hidden));
        for (dh, &p) in d_hidden.iter_mut().zip(hidden_pre.row(i)) {
            *dh *= leaky_relu_grad(p, slope);
        }
        head.hidden.backward_sample(
            input.row(i),
            &d_hidden,
            &mut head_grad.hidden,
            Some(d_input.row_mut(i)),
        );
    }
}

/// Exact reverse-mode gradients of the weighted total loss w.r.t. every
/// parameter. Max pooling routes gradient to the cached argmax, upsampling
/// scatters by the upsample map, concatenation splits.
pub fn backward(
    params: &NetworkParams,
    h: &Hierarchy,
    cache: &ActivationCache,
    grads: &LossGrads,
) -> Result<NetworkParams> {
    if cache.fingerprint != params.fingerprint() {
        return Err(Error::Contract(
            "activation cache is stale: parameters changed since forward".into(),
        ));
    }
    let cfg = &params.config;
    let levels = cfg.levels();
    let slope = cfg.leaky_slope;
    if grads.level_logits.len() != levels - 1 {
        return Err(Error::InvalidArgument("level logit gradient count mismatch".into()));
    }

    let mut g = params.zeros_like();
    let mut d_alpha: Vec<Matrix> =
        cache.alpha.iter().map(|m| Matrix::zeros(m.rows, m.cols)).collect();
    let mut d_beta: Vec<Matrix> =
        cache.beta.iter().map(|m| Matrix::zeros(m.rows, m.cols)).collect();

    // Final head.
    head_backward(
        &params.final_head,
        &mut g.final_head,
        &cache.beta[0],
        &cache.final_hidden_pre,
        &grads.final_logits,
        slope,
        &mut d_beta[0],
    );

    // Per-level code heads.
    for l in 1..levels {
        let (input, d_input) = match cfg.head_side {
            HeadSide::Decoder => (&cache.beta[l], &mut d_beta[l]),
            HeadSide::Encoder => (&cache.alpha[l], &mut d_alpha[l]),
        };
        head_backward(
            &params.heads[l - 1],
            &mut g.heads[l - 1],
            input,
            &cache.head_hidden_pre[l - 1],
            &grads.level_logits[l - 1],
            slope,
            d_input,
        );
    }

    // Densification attachment.
    let mut fd_pre_grads: Vec<Option<&Matrix>> = vec![None; levels];
    if let Some(fd) = &grads.fd_features {
        if fd.len() != levels - 1 {
            return Err(Error::InvalidArgument("fd gradient count mismatch".into()));
        }
        match cfg.fd_attachment {
            FdAttachment::Identity => {
                for l in 1..levels {
                    fd_pre_grads[l] = Some(&fd[l - 1]);
                }
            }
            FdAttachment::Perceptron => {
                for l in 1..levels {
                    let layer = &params.fd_layers[l - 1];
                    let grad_layer = &mut g.fd_layers[l - 1];
                    for i in 0..cache.beta[l].rows {
                        let dl = fd[l - 1].row(i);
                        if dl.iter().all(|&v| v == 0.0) {
                            continue;
                        }
                        layer.backward_sample(
                            cache.beta[l].row(i),
                            dl,
                            grad_layer,
                            Some(d_beta[l].row_mut(i)),
                        );
                    }
                }
            }
        }
    }

    // Decoder, bottom level up so upsample scatter targets are complete
    // before their level is processed.
    for l in 0..levels {
        let layer = &params.decoder[l];
        let pre = &cache.dec_pre[l];
        let n = pre.rows;
        let mut d_pre = Matrix::zeros(n, pre.cols);
        for i in 0..n {
            let db = d_beta[l].row(i);
            let dp = d_pre.row_mut(i);
            for (c, d) in dp.iter_mut().enumerate() {
                *d = db[c] * leaky_relu_grad(pre.get(i, c), slope);
            }
            if let Some(fdg) = fd_pre_grads[l] {
                for (d, &e) in dp.iter_mut().zip(fdg.row(i)) {
                    *d += e;
                }
            }
        }
        if l == levels - 1 {
            for i in 0..n {
                if d_pre.row(i).iter().all(|&v| v == 0.0) {
                    continue;
                }
                layer.backward_sample(
                    cache.alpha[l].row(i),
                    d_pre.row(i),
                    &mut g.decoder[l],
                    Some(d_alpha[l].row_mut(i)),
                );
            }
        } else {
            let up_map = h.levels[l + 1].upsample_map.as_ref().unwrap();
            let upper_cols = cache.beta[l + 1].cols;
            let mut x = vec![0.0; upper_cols + cache.alpha[l].cols];
            let mut d_x = vec![0.0; x.len()];
            for i in 0..n {
                if d_pre.row(i).iter().all(|&v| v == 0.0) {
                    continue;
                }
                let u = up_map[i] as usize;
                x[..upper_cols].copy_from_slice(cache.beta[l + 1].row(u));
                x[upper_cols..].copy_from_slice(cache.alpha[l].row(i));
                d_x.iter_mut().for_each(|v| *v = 0.0);
                layer.backward_sample(&x, d_pre.row(i), &mut g.decoder[l], Some(&mut d_x));
                for (d, &v) in d_beta[l + 1].row_mut(u).iter_mut().zip(&d_x[..upper_cols]) {
                    *d += v;
                }
                for (d, &v) in d_alpha[l].row_mut(i).iter_mut().zip(&d_x[upper_cols..]) {
                    *d += v;
                }
            }
        }
    }

    // Encoder, top level down so pooled gradients reach lower levels first.
    for l in (1..levels).rev() {
        let layer = &params.encoder[l];
        let pre = &cache.enc_pre[l];
        let width = pre.cols;
        let prev_width = cache.alpha[l - 1].cols;
        let argmax = &cache.pool_argmax[l];
        let mut x = vec![0.0; prev_width + 3];
        for i in 0..pre.rows {
            let center = h.levels[l].positions[i];
            for c in 0..width {
                let gd = d_alpha[l].get(i, c) * leaky_relu_grad(pre.get(i, c), slope);
                if gd == 0.0 {
                    continue;
                }
                let j = argmax[i * width + c] as usize;
                x[..prev_width].copy_from_slice(cache.alpha[l - 1].row(j));
                let sp = h.levels[l - 1].positions[j];
                x[prev_width] = sp[0] - center[0];
                x[prev_width + 1] = sp[1] - center[1];
                x[prev_width + 2] = sp[2] - center[2];
                g.encoder[l].bias[c] += gd;
                for (wg, &xi) in g.encoder[l].weight.row_mut(c).iter_mut().zip(&x) {
                    *wg += gd * xi;
                }
                let w_row = layer.weight.row(c);
                for (d, &w) in d_alpha[l - 1].row_mut(j).iter_mut().zip(&w_row[..prev_width]) {
                    *d += gd * w;
                }
            }
        }
    }
    // Input-level encoder MLP.
    {
        let pre = &cache.enc_pre[0];
        let mut d_pre = vec![0.0; pre.cols];
        for i in 0..pre.rows {
            let da = d_alpha[0].row(i);
            if da.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (c, d) in d_pre.iter_mut().enumerate() {
                *d = da[c] * leaky_relu_grad(pre.get(i, c), slope);
            }
            params.encoder[0].backward_sample(
                cache.input.row(i),
                &d_pre,
                &mut g.encoder[0],
                None,
            );
        }
    }

    Ok(g)
}

/// Argmax over final class probabilities, ties to the smallest index.
pub fn predict_labels(final_probs: &Matrix) -> Vec<i32> {
    (0..final_probs.rows)
        .map(|i| {
            let row = final_probs.row(i);
            let mut best = 0usize;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best as i32
        })
        .collect()
}

const CKPT_MAGIC: &[u8; 8] = b"RFCRCKPT";
const CKPT_VERSION: u32 = 1;

impl NetworkParams {
    /// Versioned flat binary checkpoint: header, config echo, parameter
    /// arrays in declaration order.
    pub fn save(&self, w: &mut impl Write) -> Result<()> {
        let cfg = &self.config;
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        w.write_all(&(cfg.levels() as u32).to_le_bytes())?;
        for &width in cfg.encoder_widths.iter().chain(&cfg.decoder_widths) {
            w.write_all(&(width as u32).to_le_bytes())?;
        }
        w.write_all(&(cfg.head_hidden as u32).to_le_bytes())?;
        w.write_all(&(cfg.input_dim as u32).to_le_bytes())?;
        w.write_all(&(cfg.class_count as u32).to_le_bytes())?;
        w.write_all(&cfg.leaky_slope.to_le_bytes())?;
        w.write_all(&[
            match cfg.head_side {
                HeadSide::Decoder => 0u8,
                HeadSide::Encoder => 1,
            },
            match cfg.fd_attachment {
                FdAttachment::Identity => 0u8,
                FdAttachment::Perceptron => 1,
            },
        ])?;
        for v in self.flatten() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        r.read_exact(&mut b4)?;
        let levels = u32::from_le_bytes(b4) as usize;
        if levels < 2 || levels > 64 {
            return Err(Error::Format(format!("implausible level count {levels}")));
        }
        let read_u32 = |r: &mut dyn Read| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        let encoder_widths: Vec<usize> =
            (0..levels).map(|_| read_u32(r).map(|v| v as usize)).collect::<Result<_>>()?;
        let decoder_widths: Vec<usize> =
            (0..levels).map(|_| read_u32(r).map(|v| v as usize)).collect::<Result<_>>()?;
        let head_hidden = read_u32(r)? as usize;
        let input_dim = read_u32(r)? as usize;
        let class_count = read_u32(r)? as usize;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let leaky_slope = f64::from_le_bytes(b8);
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let head_side = match b2[0] {
            0 => HeadSide::Decoder,
            1 => HeadSide::Encoder,
            v => return Err(Error::Format(format!("bad head side tag {v}"))),
        };
        let fd_attachment = match b2[1] {
            0 => FdAttachment::Identity,
            1 => FdAttachment::Perceptron,
            v => return Err(Error::Format(format!("bad fd attachment tag {v}"))),
        };
        let config = NetworkConfig {
            encoder_widths,
            decoder_widths,
            head_hidden,
            input_dim,
            leaky_slope,
            class_count,
            head_side,
            fd_attachment,
        };
        let mut params = init_params(&config, 0)?;
        let count = params.param_count();
        let mut flat = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut b8)?;
            flat.push(f64::from_le_bytes(b8));
        }
        params.assign_flat(&flat)?;
        Ok(params)
    }
}
