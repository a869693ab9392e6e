//! SoftIoU loss, AdamW, cosine schedule and the training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bitcore::FloatTensor;
use crate::data::{Dataset, Mask, Sample};
use crate::error::{Error, Result};
use crate::grad::K_MIN;
use crate::layers::{Parameterized, SteSite};
use crate::metrics::{evaluate, MetricsReport};
use crate::network::Model;
use crate::param::{Gradients, Param, ParamRole};

/// Smoothing term of the SoftIoU ratio.
pub const SOFT_IOU_EPS: f64 = 1.0;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_loss_inputs(logits: &FloatTensor, mask: &FloatTensor) -> Result<()> {
    if logits.shape() != mask.shape() {
        return Err(Error::Dimension(format!(
            "logits {:?} vs mask {:?}",
            logits.shape(),
            mask.shape()
        )));
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidInput("mask must contain only 0 and 1".into()));
    }
    Ok(())
}

fn soft_iou_terms(logits: &FloatTensor, mask: &FloatTensor) -> (Vec<f64>, f64, f64) {
    let p: Vec<f64> = logits.data().iter().map(|&z| sigmoid(z)).collect();
    let (mut inter, mut sum) = (0.0, 0.0);
    for (&pi, &yi) in p.iter().zip(mask.data()) {
        inter += pi * yi;
        sum += pi + yi;
    }
    (p, inter, sum - inter)
}

/// `1 − (Σp·y + ε) / (Σp + Σy − Σp·y + ε)` with `p = sigmoid(logits)`.
pub fn soft_iou_loss(logits: &FloatTensor, mask: &FloatTensor) -> Result<f64> {
    check_loss_inputs(logits, mask)?;
    let (_, i, u) = soft_iou_terms(logits, mask);
    Ok(1.0 - (i + SOFT_IOU_EPS) / (u + SOFT_IOU_EPS))
}

/// Loss and its gradient with respect to the logits.
pub fn soft_iou_loss_grad(logits: &FloatTensor, mask: &FloatTensor) -> Result<(f64, FloatTensor)> {
    check_loss_inputs(logits, mask)?;
    let (p, i, u) = soft_iou_terms(logits, mask);
    let (num, den) = (i + SOFT_IOU_EPS, u + SOFT_IOU_EPS);
    let grad = p
        .iter()
        .zip(mask.data())
        .map(|(&pi, &yi)| {
            // ∂I/∂p = y and ∂U/∂p = 1 − y.
            let dl_dp = -(yi * den - num * (1.0 - yi)) / (den * den);
            dl_dp * pi * (1.0 - pi)
        })
        .collect();
    Ok((1.0 - num / den, FloatTensor::new(logits.shape(), grad)?))
}

/// `base_lr · ½ · (1 + cos(π · step / total))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::InvalidInput(format!(
            "schedule step {step} beyond horizon {total_steps}"
        )));
    }
    if total_steps == 0 {
        return Ok(base_lr);
    }
    let t = step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Adaptive moments with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }
}

impl AdamW {
    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update of every parameter reachable from `params`. Sharpness
    /// parameters skip weight decay and are clamped to at least `K_MIN`;
    /// all values are then rounded to single precision.
    pub fn step(&mut self, params: &mut impl Parameterized, grads: &Gradients, lr: f64, weight_decay: f64) -> Result<()> {
        let mut err = None;
        params.visit(&mut |p| {
            if err.is_none() && grads.by_id(p.id).len() != p.value.len() {
                err = Some(Error::Dimension(format!(
                    "gradient for {} has {} values, parameter has {}",
                    p.name,
                    grads.by_id(p.id).len(),
                    p.value.len()
                )));
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - b2.powi(self.t));
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |p: &mut Param| {
            let id = p.id;
            if m_all.len() <= id {
                m_all.resize(id + 1, Vec::new());
                v_all.resize(id + 1, Vec::new());
            }
            if m_all[id].len() != p.value.len() {
                m_all[id] = vec![0.0; p.value.len()];
                v_all[id] = vec![0.0; p.value.len()];
            }
            let (m, v) = (&mut m_all[id], &mut v_all[id]);
            let decay = if p.role == ParamRole::Sharpness { 0.0 } else { weight_decay };
            let g = grads.by_id(id);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                *w -= lr * decay * *w;
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                if p.role == ParamRole::Sharpness {
                    *w = w.max(K_MIN);
                }
            }
            p.round_to_storage();
        });
        Ok(())
    }
}

impl Parameterized for Vec<Param> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.iter().for_each(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.iter_mut().for_each(f)
    }

    fn visit_sites_mut(&mut self, _f: &mut dyn FnMut(&mut SteSite)) {}
}

/// Free-function form of [`AdamW::step`].
pub fn adamw_step(
    params: &mut impl Parameterized,
    grads: &Gradients,
    state: &mut AdamW,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    state.step(params, grads, lr, weight_decay)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub seed: u64,
    /// Schedule length in optimizer steps; `None` spans the whole run.
    pub horizon: Option<usize>,
    pub threshold: f64,
    pub match_dist: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 1e-3,
            weight_decay: 1e-4,
            batch: 8,
            seed: 0,
            horizon: None,
            threshold: 0.5,
            match_dist: 3.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("train.epochs and train.batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be > 0 and weight decay {} >= 0",
                self.lr, self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val: MetricsReport,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub sharpness: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Parameter values at the best validation mIoU.
    pub best_params: Vec<FloatTensor>,
}

impl TrainReport {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// Largest ratio of final to initial k over all Sign sites.
    pub fn max_sharpness_growth(&self, k_init: f64) -> f64 {
        self.last()
            .map(|r| r.sharpness.iter().map(|(_, k)| k / k_init).fold(0.0, f64::max))
            .unwrap_or(0.0)
    }

    /// One `key=value` record per epoch.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for r in &self.epochs {
            let _ = write!(
                s,
                "epoch={} loss={:.9} miou={:.12} pd={:.12} fa={:.12} lr={:.9e}",
                r.epoch, r.loss, r.val.miou, r.val.pd, r.val.fa, r.lr
            );
            for (name, k) in &r.sharpness {
                let _ = write!(s, " k.{name}={k:.6e}");
            }
            s.push('\n');
        }
        let _ = writeln!(s, "best_epoch={}", self.best_epoch);
        s
    }
}

/// Loss and gradients for one sample.
pub fn sample_gradients(model: &Model, image: &FloatTensor, mask: &Mask) -> Result<(f64, Gradients)> {
    let (logits, tape) = model.forward_cached(image)?;
    let (loss, dlogits) = soft_iou_loss_grad(&logits, &mask.to_tensor())?;
    if !loss.is_finite() || !dlogits.is_finite() {
        return Err(non_finite(model, image, "loss"));
    }
    Ok((loss, model.backward(&tape, &dlogits)?))
}

fn non_finite(model: &Model, image: &FloatTensor, what: &str) -> Error {
    Error::NonFinite {
        layer: model
            .first_non_finite_layer(image)
            .unwrap_or_else(|| "loss".to_string()),
        detail: format!("non-finite {what}"),
    }
}

/// Mean loss and averaged gradients over a batch. Per-sample work runs in
/// parallel; the reduction runs in batch order, so results do not depend on
/// scheduling.
pub fn batch_gradients(model: &Model, batch: &[&Sample]) -> Result<(f64, Gradients)> {
    let per_item: Vec<Result<(f64, Gradients)>> = batch
        .par_iter()
        .map(|s| sample_gradients(model, &s.image, &s.mask))
        .collect();
    let mut total = model.zero_grads();
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for r in per_item {
        let (l, g) = r?;
        loss += l;
        total.add_scaled(&g, scale);
    }
    Ok((loss * scale, total))
}

/// Sigmoid probability maps for every sample.
pub fn predict(model: &Model, samples: &[Sample]) -> Result<Vec<FloatTensor>> {
    samples
        .par_iter()
        .map(|s| Ok(model.forward(&s.image)?.map(sigmoid)))
        .collect()
}

pub fn validate(model: &Model, samples: &[Sample], threshold: f64, match_dist: f64) -> Result<MetricsReport> {
    let preds = predict(model, samples)?;
    let masks: Vec<Mask> = samples.iter().map(|s| s.mask.clone()).collect();
    evaluate(&preds, &masks, threshold, match_dist)
}

/// Trains in place. `on_epoch` sees each record as it is produced.
pub fn train_loop(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(Error::InvalidInput("training and validation splits must be nonempty".into()));
    }
    let steps_per_epoch = dataset.train.len().div_ceil(cfg.batch);
    let horizon = cfg.horizon.unwrap_or(cfg.epochs * steps_per_epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::default();
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<FloatTensor>)> = None;
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut lr) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &dataset.train[i]).collect();
            let (loss, grads) = batch_gradients(model, &batch)?;
            if !grads.is_finite() {
                return Err(non_finite(model, &batch[0].image, "gradient"));
            }
            lr = cosine_lr(step.min(horizon), horizon, cfg.lr)?;
            opt.step(model, &grads, lr, cfg.weight_decay)?;
            if let Some(p) = model.params().into_iter().find(|p| !p.value.is_finite()) {
                return Err(Error::NonFinite {
                    layer: p.name.clone(),
                    detail: format!("parameter overflowed at step {step}"),
                });
            }
            loss_sum += loss * batch.len() as f64;
            step += 1;
        }
        let val = validate(model, &dataset.val, cfg.threshold, cfg.match_dist)?;
        let record = EpochRecord {
            epoch,
            loss: loss_sum / dataset.train.len() as f64,
            val,
            lr,
            sharpness: model.sharpness(),
        };
        if best.as_ref().is_none_or(|(m, _, _)| record.val.miou > *m) {
            best = Some((record.val.miou, epoch, model.snapshot()));
        }
        on_epoch(&record);
        epochs.push(record);
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_params,
    })
}
