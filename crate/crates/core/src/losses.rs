//! Per-pixel losses over score maps.
//!
//! Losses are sums over pixels (unnormalised by default), so the loss of a
//! whole image equals the sum of its per-pixel terms and a gradient step on
//! the image is a step on the minibatch of all its output cells. Pixels
//! labelled [`IGNORE`] contribute neither loss nor gradient.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::{Dims, LabelMap, Tensor, IGNORE};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Multinomial logistic loss summed over pixels.
    SoftmaxSum,
    /// Independent per-class binary cross-entropy on sigmoid scores.
    SigmoidCe,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Per-class weights indexed by the true label; uniform 1 when absent.
    pub class_weights: Option<Vec<f64>>,
    /// Probability that an output cell is kept by loss sampling.
    pub sample_keep_p: f64,
    /// Divide by the number of contributing pixels (diagnostics only).
    pub normalize: bool,
    /// Scores omit the background channel; background is a constant zero score.
    /// Only meaningful with [`LossKind::SigmoidCe`].
    pub null_background: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::SoftmaxSum,
            class_weights: None,
            sample_keep_p: 1.0,
            normalize: false,
            null_background: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_keep_p > 0.0 && self.sample_keep_p <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "loss keep probability {} outside (0, 1]",
                self.sample_keep_p
            )));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidParameter("class weights must be finite and ≥ 0".into()));
            }
        }
        if self.null_background && self.kind != LossKind::SigmoidCe {
            return Err(Error::InvalidParameter(
                "the null background model needs the sigmoid cross-entropy loss".into(),
            ));
        }
        Ok(())
    }

    /// Number of classes (including background) for score maps with `channels` channels.
    pub fn n_classes(&self, channels: usize) -> usize {
        if self.null_background {
            channels + 1
        } else {
            channels
        }
    }
}

/// Cells kept by loss sampling, laid out like a [`LabelMap`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LossMask {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub keep: Vec<bool>,
}

impl LossMask {
    pub fn all(n: usize, h: usize, w: usize) -> Self {
        LossMask {
            n,
            h,
            w,
            keep: vec![true; n * h * w],
        }
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Independent Bernoulli(`keep_p`) mask over `n × h × w` output cells.
pub fn sample_loss_mask(n: usize, h: usize, w: usize, keep_p: f64, seed: u64) -> Result<LossMask> {
    if !(keep_p > 0.0 && keep_p <= 1.0) {
        return Err(Error::InvalidParameter(format!("keep probability {keep_p} outside (0, 1]")));
    }
    if keep_p == 1.0 {
        return Ok(LossMask::all(n, h, w));
    }
    let mut rng = rng_for(seed, crate::rng::stream::LOSS_SAMPLING, 0);
    let keep = (0..n * h * w).map(|_| rng.gen::<f64>() < keep_p).collect();
    Ok(LossMask { n, h, w, keep })
}

fn check_inputs(scores: &Tensor, labels: &LabelMap, mask: Option<&LossMask>, n_classes: usize) -> Result<()> {
    let d = scores.dims();
    if (labels.n, labels.h, labels.w) != (d.n, d.h, d.w) {
        return Err(Error::Shape(format!(
            "scores {d} do not match labels {}×{}×{}",
            labels.n, labels.h, labels.w
        )));
    }
    if let Some(m) = mask {
        if (m.n, m.h, m.w) != (d.n, d.h, d.w) {
            return Err(Error::Shape(format!("loss mask {}×{}×{} does not match scores {d}", m.n, m.h, m.w)));
        }
    }
    labels.validate(n_classes)
}

fn class_weight(cfg: &LossConfig, label: u8) -> Result<f64> {
    match &cfg.class_weights {
        None => Ok(1.0),
        Some(w) => w.get(label as usize).copied().ok_or(Error::InvalidLabel {
            label,
            n_classes: w.len(),
        }),
    }
}

/// Loss and gradient with respect to the scores, dispatching on `cfg.kind`.
pub fn loss(scores: &Tensor, labels: &LabelMap, cfg: &LossConfig, mask: Option<&LossMask>) -> Result<(f64, Tensor)> {
    match cfg.kind {
        LossKind::SoftmaxSum => softmax_loss(scores, labels, cfg, mask),
        LossKind::SigmoidCe => sigmoid_ce_loss(scores, labels, cfg, mask),
    }
}

fn finish(total: f64, count: usize, mut grad: Tensor, cfg: &LossConfig) -> (f64, Tensor) {
    if cfg.normalize && count > 0 {
        let s = 1.0 / count as f64;
        grad.data_mut().iter_mut().for_each(|g| *g *= s);
        (total * s, grad)
    } else {
        (total, grad)
    }
}

/// Summed multinomial logistic loss, `−log softmax(scores)[label]` per pixel.
pub fn softmax_loss(scores: &Tensor, labels: &LabelMap, cfg: &LossConfig, mask: Option<&LossMask>) -> Result<(f64, Tensor)> {
    cfg.validate()?;
    let d = scores.dims();
    check_inputs(scores, labels, mask, d.c)?;
    let mut grad = Tensor::zeros(d)?;
    let mut total = 0.0;
    let mut count = 0;
    let hw = d.h * d.w;
    let mut probs = vec![0.0; d.c];
    for n in 0..d.n {
        for p in 0..hw {
            let label = labels.data[n * hw + p];
            if label == IGNORE || mask.is_some_and(|m| !m.keep[n * hw + p]) {
                continue;
            }
            let wt = class_weight(cfg, label)?;
            let base = n * d.c * hw + p;
            let mut max = f64::NEG_INFINITY;
            for c in 0..d.c {
                max = max.max(scores.data()[base + c * hw]);
            }
            let mut z = 0.0;
            for c in 0..d.c {
                probs[c] = (scores.data()[base + c * hw] - max).exp();
                z += probs[c];
            }
            let lse = max + z.ln();
            total += wt * (lse - scores.data()[base + label as usize * hw]);
            count += 1;
            let g = grad.data_mut();
            for c in 0..d.c {
                let target = if c == label as usize { 1.0 } else { 0.0 };
                g[base + c * hw] = wt * (probs[c] / z - target);
            }
        }
    }
    Ok(finish(total, count, grad, cfg))
}

/// Stable `−[t·log σ(x) + (1 − t)·log(1 − σ(x))]`.
pub fn sigmoid_ce_term(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Summed per-class binary cross-entropy on sigmoid scores.
///
/// Channel `c` targets class `c`, or class `c + 1` with `null_background`
/// (background pixels then have all-zero targets).
pub fn sigmoid_ce_loss(scores: &Tensor, labels: &LabelMap, cfg: &LossConfig, mask: Option<&LossMask>) -> Result<(f64, Tensor)> {
    cfg.validate()?;
    let d = scores.dims();
    let shift = usize::from(cfg.null_background);
    check_inputs(scores, labels, mask, d.c + shift)?;
    let mut grad = Tensor::zeros(d)?;
    let mut total = 0.0;
    let mut count = 0;
    let hw = d.h * d.w;
    for n in 0..d.n {
        for p in 0..hw {
            let label = labels.data[n * hw + p];
            if label == IGNORE || mask.is_some_and(|m| !m.keep[n * hw + p]) {
                continue;
            }
            let wt = class_weight(cfg, label)?;
            count += 1;
            let base = n * d.c * hw + p;
            for c in 0..d.c {
                let x = scores.data()[base + c * hw];
                let t = if c + shift == label as usize { 1.0 } else { 0.0 };
                total += wt * sigmoid_ce_term(x, t);
                grad.data_mut()[base + c * hw] = wt * (sigmoid(x) - t);
            }
        }
    }
    Ok(finish(total, count, grad, cfg))
}

/// Labels under a null background model: a zero background score is prepended
/// and the argmax taken, so background wins unless some class score is
/// strictly positive.
pub fn null_background_infer(class_scores: &Tensor) -> Result<LabelMap> {
    let d = class_scores.dims();
    let full = Tensor::from_fn(Dims::new(d.n, d.c + 1, d.h, d.w), |n, c, i, j| {
        if c == 0 {
            0.0
        } else {
            class_scores.at(n, c - 1, i, j)
        }
    })?;
    Ok(full.channel_argmax())
}

/// Labels predicted from network scores under a loss configuration.
pub fn predict(scores: &Tensor, cfg: &LossConfig) -> Result<LabelMap> {
    if cfg.null_background {
        null_background_infer(scores)
    } else {
        Ok(scores.channel_argmax())
    }
}
