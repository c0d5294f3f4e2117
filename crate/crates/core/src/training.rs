//! Stochastic gradient descent with momentum over whole images.
//!
//! The update is `v ← −η(∇ + λθ) + p·v`, `θ ← θ + v`, where `∇` is the
//! gradient summed over the `k` images of a batch. Unrolling the recurrence,
//! the example seen `j` steps ago enters the current update with coefficient
//! `p^⌊j/k⌋`, so momentum `p` at batch size `k` behaves roughly like momentum
//! `p^(k′/k)` at batch size `k′`.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::field;
use crate::graph::{Graph, Op, ParamRole};
use crate::losses::{self, sample_loss_mask, LossConfig};
use crate::metrics::{compute_metrics, ConfusionMatrix, Metrics};
use crate::rng::{derive_seed, rng_for, stream};
use crate::tensor::{Dims, LabelMap, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Images per update.
    pub batch_size: usize,
    /// Process the images of a batch one at a time, summing gradients;
    /// otherwise they are stacked into one batch tensor.
    pub accumulate: bool,
    pub weight_decay: f64,
    pub bias_lr_multiplier: f64,
    /// `(first update, multiplier)`; the last entry whose start has been
    /// reached applies.
    pub lr_schedule: Vec<(usize, f64)>,
}

pub const DEFAULT_WEIGHT_DECAY: f64 = 5e-4;
pub const ALT_WEIGHT_DECAY: f64 = 2e-4;

impl Default for OptimConfig {
    fn default() -> Self {
        Regime::Heavy.optim(1e-4)
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidParameter(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidParameter("weight decay must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn lr_multiplier(&self, update: usize) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|(start, _)| *start <= update)
            .last()
            .map_or(1.0, |(_, m)| *m)
    }

    /// Appends a stage starting at `update` whose multiplier is the current
    /// one times `drop`.
    pub fn push_stage(&mut self, update: usize, drop: f64) {
        let m = self.lr_multiplier(update) * drop;
        self.lr_schedule.push((update, m));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    /// Gradients summed over 20 images, momentum 0.9.
    Accumulation,
    /// One image per update, momentum 0.9.
    Online,
    /// One image per update, momentum 0.99.
    Heavy,
}

impl Regime {
    pub fn batch_and_momentum(self) -> (usize, f64) {
        match self {
            Regime::Accumulation => (20, 0.9),
            Regime::Online => (1, 0.9),
            Regime::Heavy => (1, 0.99),
        }
    }

    pub fn optim(self, learning_rate: f64) -> OptimConfig {
        let (batch_size, momentum) = self.batch_and_momentum();
        OptimConfig {
            learning_rate,
            momentum,
            batch_size,
            accumulate: true,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            bias_lr_multiplier: 2.0,
            lr_schedule: Vec::new(),
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accum" | "accumulation" => Ok(Regime::Accumulation),
            "online" => Ok(Regime::Online),
            "heavy" => Ok(Regime::Heavy),
            _ => Err(Error::InvalidParameter(format!("unknown regime `{s}` (accum, online, heavy)"))),
        }
    }
}

/// Momentum `p′` at batch size `k′` matching momentum `p` at batch size `k`:
/// `p^(1/k) = p′^(1/k′)`.
pub fn equivalent_momentum(p: f64, k: usize, k_prime: usize) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidParameter(format!("momentum {p} outside (0, 1)")));
    }
    if k == 0 || k_prime == 0 {
        return Err(Error::InvalidParameter("batch sizes must be at least 1".into()));
    }
    Ok(p.powf(k_prime as f64 / k as f64))
}

/// `c_j = p^⌊j/k⌋` for `j = 0..horizon`, most recent example first.
pub fn effective_coefficients(p: f64, k: usize, horizon: usize) -> Vec<f64> {
    (0..horizon).map(|j| p.powi((j / k.max(1)) as i32)).collect()
}

/// One momentum update of a flat parameter vector.
pub fn momentum_update(theta: &mut [f64], grad: &[f64], velocity: &mut [f64], eta: f64, p: f64, lambda: f64) {
    for ((t, g), v) in theta.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = -eta * (g + lambda * *t) + p * *v;
        *t += *v;
    }
}

/// Per-parameter velocities, zero-initialised.
#[derive(Clone, Debug)]
pub struct VelocityStore {
    pub velocity: Vec<Tensor>,
}

impl VelocityStore {
    pub fn new(g: &Graph) -> Self {
        VelocityStore {
            velocity: g
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.dims()).expect("parameter dims are valid"))
                .collect(),
        }
    }
}

/// Applies one update to every learnable parameter of `g` from its
/// accumulated gradient; `lr_mult` scales the base learning rate.
pub fn sgd_momentum_step(g: &mut Graph, velocity: &mut VelocityStore, cfg: &OptimConfig, lr_mult: f64) -> Result<()> {
    if velocity.velocity.len() != g.params().len() {
        return Err(Error::Shape(format!(
            "{} velocities for {} parameters",
            velocity.velocity.len(),
            g.params().len()
        )));
    }
    for (p, v) in g.params_mut().iter_mut().zip(&mut velocity.velocity) {
        if !p.learnable {
            continue;
        }
        if v.dims() != p.value.dims() {
            return Err(Error::Shape(format!("velocity for `{}` has dims {}", p.name, v.dims())));
        }
        let mut eta = cfg.learning_rate * lr_mult;
        if p.role == ParamRole::Bias {
            eta *= cfg.bias_lr_multiplier;
        }
        let grad = p.grad.data().to_vec();
        momentum_update(p.value.data_mut(), &grad, v.data_mut(), eta, cfg.momentum, cfg.weight_decay);
    }
    Ok(())
}

/// Uniform `±sqrt(6 / fan_in)` weights, fan-in being `c·k_h·k_w`.
pub fn fanin_uniform(dims: Dims, seed: u64) -> Result<Tensor> {
    let fan_in = (dims.c * dims.h * dims.w).max(1) as f64;
    let a = (6.0 / fan_in).sqrt();
    let mut rng = rng_for(seed, stream::INIT, 0);
    Tensor::from_fn(dims, |_, _, _, _| rng.gen_range(-a..a))
}

/// Controls a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub updates: usize,
    /// Evaluate (and log) every this many updates, and after the last one.
    pub eval_every: usize,
    pub seed: u64,
    /// Visit training images in index order instead of a seeded shuffle.
    pub fixed_order: bool,
    /// `(mirror, jitter)` augmentation.
    pub augment: Option<(bool, usize)>,
    /// Restore the parameters of the best evaluation at the end.
    pub restore_best: bool,
    /// Stop after the first evaluation whose mean IU reaches this value.
    pub stop_at_iu: Option<f64>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            updates: 1000,
            eval_every: 100,
            seed: 0,
            fixed_order: false,
            augment: None,
            restore_best: false,
            stop_at_iu: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub iteration: usize,
    /// Mean training loss per image since the previous record.
    pub loss: f64,
    pub metrics: Metrics,
    pub seconds: f64,
}

impl TrainRecord {
    pub const HEADER: &'static str = "iteration loss pixel_acc mean_acc mean_iu fw_iu";

    /// Reproducible fields only; wall-clock time is left out.
    pub fn line(&self) -> String {
        format!(
            "{} {:.6} {:.6} {:.6} {:.6} {:.6}",
            self.iteration,
            self.loss,
            self.metrics.pixel_acc,
            self.metrics.mean_acc,
            self.metrics.mean_iu,
            self.metrics.fw_iu
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    pub best_iu: f64,
    pub best_iteration: usize,
    pub best_params: Option<Vec<Tensor>>,
    pub updates_done: usize,
    pub seconds: f64,
}

impl TrainLog {
    /// One line per record; `timed` appends a `seconds` column, which differs
    /// between otherwise identical runs.
    pub fn to_text(&self, timed: bool) -> String {
        let mut s = String::from(TrainRecord::HEADER);
        if timed {
            s.push_str(" seconds");
        }
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.line());
            if timed {
                s.push_str(&format!(" {:.3}", r.seconds));
            }
            s.push('\n');
        }
        s
    }

    /// Appends untimed records to a log file, writing the header if the file is new.
    pub fn append_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let fresh = !path.exists();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let text = self.to_text(false);
        let text = if fresh { &text[..] } else { &text[TrainRecord::HEADER.len() + 1..] };
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// First logged iteration whose mean IU reaches `threshold`.
    pub fn iterations_to(&self, threshold: f64) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.metrics.mean_iu >= threshold)
            .map(|r| r.iteration)
    }

    pub fn last(&self) -> Option<&TrainRecord> {
        self.records.last()
    }
}

/// Scores, predictions and confusion counts of `g` on every sample, computed
/// in parallel on clones of the graph.
pub fn evaluate(g: &Graph, ds: &Dataset, loss_cfg: &LossConfig) -> Result<(Metrics, ConfusionMatrix)> {
    let cm = confusion(g, ds, loss_cfg)?;
    Ok((compute_metrics(&cm, false)?, cm))
}

pub fn confusion(g: &Graph, ds: &Dataset, loss_cfg: &LossConfig) -> Result<ConfusionMatrix> {
    let chunk = ds.len().div_ceil(rayon::current_num_threads().max(1)).max(1);
    let parts: Vec<Result<ConfusionMatrix>> = ds
        .samples
        .par_chunks(chunk)
        .map(|samples| {
            let mut g = g.clone();
            g.set_training(false);
            let mut cm = ConfusionMatrix::new(ds.n_classes);
            for s in samples {
                let scores = g.forward_single(&s.image)?;
                let pred = losses::predict(&scores, loss_cfg)?;
                cm.accumulate(&pred, &s.label)?;
            }
            Ok(cm)
        })
        .collect();
    let mut cm = ConfusionMatrix::new(ds.n_classes);
    for p in parts {
        cm.merge(&p?)?;
    }
    Ok(cm)
}

fn epoch_order(n: usize, seed: u64, epoch: usize, fixed: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if !fixed {
        order.shuffle(&mut rng_for(seed, stream::ORDER, epoch as u64));
    }
    order
}

/// Trains `g` on `train`, evaluating on `eval` every `schedule.eval_every`
/// updates. Loss sampling with keep probability `p` grows each update to
/// `⌈k/p⌉` images so the number of kept loss terms per update is unchanged.
pub fn train(
    g: &mut Graph,
    train: &Dataset,
    eval: &Dataset,
    loss_cfg: &LossConfig,
    optim: &OptimConfig,
    schedule: &TrainSchedule,
) -> Result<TrainLog> {
    optim.validate()?;
    loss_cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if schedule.eval_every == 0 {
        return Err(Error::InvalidParameter("eval_every must be at least 1".into()));
    }
    let start = Instant::now();
    let per_update = (optim.batch_size as f64 / loss_cfg.sample_keep_p).ceil() as usize;
    let mut velocity = VelocityStore::new(g);
    let mut log = TrainLog {
        best_iu: f64::NEG_INFINITY,
        ..Default::default()
    };
    let mut epoch = 0;
    let mut order = epoch_order(train.len(), schedule.seed, epoch, schedule.fixed_order);
    let mut cursor = 0;
    let mut example = 0u64;
    let mut loss_sum = 0.0;
    let mut loss_images = 0usize;
    g.set_training(true);
    for t in 0..schedule.updates {
        g.zero_grads();
        let mut batch = Vec::with_capacity(per_update);
        for _ in 0..per_update {
            if cursor == order.len() {
                epoch += 1;
                order = epoch_order(train.len(), schedule.seed, epoch, schedule.fixed_order);
                cursor = 0;
            }
            let s = &train.samples[order[cursor]];
            cursor += 1;
            let s = match schedule.augment {
                Some((mirror, jitter)) => {
                    crate::data::augment(s, mirror, jitter, derive_seed(schedule.seed, stream::AUGMENT, example))
                }
                None => s.clone(),
            };
            batch.push((s, example));
            example += 1;
        }
        let groups: Vec<&[_]> = if optim.accumulate {
            batch.chunks(1).collect()
        } else {
            vec![&batch[..]]
        };
        for group in groups {
            let images: Vec<&Tensor> = group.iter().map(|(s, _)| &s.image).collect();
            let labels: Vec<&LabelMap> = group.iter().map(|(s, _)| &s.label).collect();
            let x = if images.len() == 1 { images[0].clone() } else { Tensor::stack(&images)? };
            let y = if labels.len() == 1 { labels[0].clone() } else { LabelMap::stack(&labels)? };
            let ex = group[0].1;
            g.set_dropout_seed(derive_seed(schedule.seed, stream::DROPOUT, ex));
            let scores = g.forward_single(&x)?;
            let mask = if loss_cfg.sample_keep_p < 1.0 {
                let d = scores.dims();
                Some(sample_loss_mask(
                    d.n,
                    d.h,
                    d.w,
                    loss_cfg.sample_keep_p,
                    derive_seed(schedule.seed, stream::LOSS_SAMPLING, ex),
                )?)
            } else {
                None
            };
            let (l, grad) = losses::loss(&scores, &y, loss_cfg, mask.as_ref())?;
            if !l.is_finite() || !grad.is_finite() {
                g.set_training(false);
                return Err(Error::Divergence { update: t, loss: l });
            }
            g.backward(&grad)?;
            loss_sum += l;
            loss_images += group.len();
        }
        sgd_momentum_step(g, &mut velocity, optim, optim.lr_multiplier(t))?;
        log.updates_done = t + 1;
        if (t + 1) % schedule.eval_every == 0 || t + 1 == schedule.updates {
            let (metrics, _) = evaluate(g, eval, loss_cfg)?;
            let record = TrainRecord {
                iteration: t + 1,
                loss: loss_sum / loss_images.max(1) as f64,
                metrics,
                seconds: start.elapsed().as_secs_f64(),
            };
            loss_sum = 0.0;
            loss_images = 0;
            log.records.push(record);
            if metrics.mean_iu > log.best_iu {
                log.best_iu = metrics.mean_iu;
                log.best_iteration = t + 1;
                log.best_params = Some(g.param_values());
            }
            if schedule.stop_at_iu.is_some_and(|th| metrics.mean_iu >= th) {
                break;
            }
        }
    }
    g.set_training(false);
    if schedule.restore_best {
        if let Some(best) = &log.best_params {
            g.set_param_values(best)?;
        }
    }
    log.seconds = start.elapsed().as_secs_f64();
    Ok(log)
}

/// Comparison of one whole-image gradient against the sum of per-field
/// patch gradients.
#[derive(Clone, Debug)]
pub struct PatchReport {
    pub whole_loss: f64,
    pub patch_loss: f64,
    pub whole_grad: Vec<f64>,
    pub patch_grad: Vec<f64>,
    /// `max |whole − patch| / max |whole|` over all learnable parameters.
    pub max_rel_err: f64,
    pub patches: usize,
}

fn learnable_grads(g: &Graph) -> Vec<f64> {
    g.params()
        .iter()
        .filter(|p| p.learnable)
        .flat_map(|p| p.grad.data().iter().copied())
        .collect()
}

/// Gradient of the loss on a whole image versus the summed gradients of each
/// output cell's receptive-field patch processed on its own.
///
/// `labels` are at output resolution. The graph must be free of padding and
/// upsampling so that every patch reproduces its output cell exactly.
pub fn whole_image_equals_patch_batch(g: &mut Graph, image: &Tensor, labels: &LabelMap, loss_cfg: &LossConfig) -> Result<PatchReport> {
    for node in g.nodes() {
        let padded = match &node.op {
            Op::Conv { geometry, .. } => geometry.pad > 0,
            Op::Pool(p) => p.pad > 0,
            Op::Upsample { .. } | Op::Crop { .. } => true,
            _ => false,
        };
        if padded {
            return Err(Error::InvalidInput(format!(
                "`{}` pads or resamples; patches would not reproduce whole-image outputs",
                node.name
            )));
        }
    }
    let f = field::graph_fields(g)?[g.output_id()?];
    if !f.rf_size.is_integer() || !f.eff_stride.is_integer() {
        return Err(Error::InvalidInput("fractional receptive field".into()));
    }
    let rf = f.rf_size.to_integer() as usize;
    let stride = f.eff_stride.to_integer() as usize;
    g.set_training(false);

    g.zero_grads();
    let scores = g.forward_single(image)?;
    let (whole_loss, grad) = losses::loss(&scores, labels, loss_cfg, None)?;
    g.backward(&grad)?;
    let whole_grad = learnable_grads(g);

    let d = scores.dims();
    let img_dims = image.dims();
    let plane = img_dims.c * img_dims.h * img_dims.w;
    g.zero_grads();
    let mut patch_loss = 0.0;
    for n in 0..d.n {
        let one = Tensor::from_vec(
            Dims::new(1, img_dims.c, img_dims.h, img_dims.w),
            image.data()[n * plane..(n + 1) * plane].to_vec(),
        )?;
        for i in 0..d.h {
            for j in 0..d.w {
                let patch = one.crop(i * stride, j * stride, rf, rf)?;
                let out = g.forward_single(&patch)?;
                let label = LabelMap::from_vec(1, 1, 1, vec![labels.at(n, i, j)])?;
                let (l, gr) = losses::loss(&out, &label, loss_cfg, None)?;
                g.backward(&gr)?;
                patch_loss += l;
            }
        }
    }
    let patch_grad = learnable_grads(g);
    let scale = whole_grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = whole_grad
        .iter()
        .zip(&patch_grad)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(PatchReport {
        whole_loss,
        patch_loss,
        whole_grad,
        patch_grad,
        max_rel_err: if scale > 0.0 { diff / scale } else { diff },
        patches: d.n * d.h * d.w,
    })
}
