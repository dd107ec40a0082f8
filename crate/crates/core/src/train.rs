//! Full-batch training with AdamW and a one-step learning-rate decay.

use rayon::prelude::*;

use crate::data::{ImageRecord, TokenSet};
use crate::error::{Error, Result};
use crate::loss::{match_targets, total_loss, LossBreakdown, MatchTarget};
use crate::model::{ForwardOptions, Model};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of the steps run at the base rate before the ×0.1 decay.
    pub decay_at: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1500,
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_at: 2.0 / 3.0,
            clip_norm: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("lr", self.lr > 0.0 && self.lr.is_finite()),
            ("weight_decay", self.weight_decay >= 0.0),
            ("beta1", (0.0..1.0).contains(&self.beta1)),
            ("beta2", (0.0..1.0).contains(&self.beta2)),
            ("eps", self.eps > 0.0),
            ("decay_at", (0.0..=1.0).contains(&self.decay_at)),
            ("clip_norm", self.clip_norm >= 0.0),
        ];
        match checks.iter().find(|c| !c.1) {
            Some((field, _)) => Err(Error::validation(*field, "out of range")),
            None => Ok(()),
        }
    }

    /// Base rate for the first `decay_at` of the run, a tenth of it after.
    pub fn lr_at(&self, step: usize) -> f64 {
        let boundary = (self.steps as f64 * self.decay_at).ceil() as usize;
        if step < boundary {
            self.lr
        } else {
            self.lr * 0.1
        }
    }
}

/// Decoupled-weight-decay Adam state.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamW {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let iter = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((pv, &gv), (mv, vv)) in iter {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                let update = (*mv / c1) / ((*vv / c2).sqrt() + cfg.eps);
                *pv -= lr * (update + cfg.weight_decay * *pv);
            }
        }
    }
}

/// Tokens and merged targets for each training image, in image-id order.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub items: Vec<(u64, Tensor, Vec<MatchTarget>)>,
}

impl TrainingSet {
    pub fn new(tokens: &TokenSet, records: &[ImageRecord]) -> Result<Self> {
        let mut sorted: Vec<&ImageRecord> = records.iter().collect();
        sorted.sort_by_key(|r| r.image_id);
        let items = sorted
            .into_iter()
            .map(|r| {
                let t = tokens.get(r.image_id).ok_or_else(|| {
                    Error::validation("tokens", format!("no tokens for image {}", r.image_id))
                })?;
                Ok((r.image_id, t.clone(), match_targets(r)))
            })
            .collect::<Result<Vec<_>>>()?;
        if items.is_empty() {
            return Err(Error::validation("data", "no training images"));
        }
        Ok(TrainingSet { items })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    /// Mean over images.
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

/// Loss and gradients of one image.
pub fn image_gradients(model: &Model, tokens: &Tensor, targets: &[MatchTarget]) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true, ForwardOptions::default());
    let out = bound.forward(&mut tape, tokens)?;
    let loss = total_loss(&mut tape, &out, targets, &model.config().loss())?;
    let grads = tape.backward(loss.total)?;
    let per_param = bound
        .vars()
        .iter()
        .zip(model.weights().tensors())
        .map(|(&v, w)| grads.get_or_zeros(v, w.shape()))
        .collect();
    Ok((loss.breakdown, per_param))
}

/// Mean loss and gradient over the set. Images run in parallel; partial
/// results are reduced in image order so the outcome is deterministic.
pub fn batch_gradients(model: &Model, data: &TrainingSet) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let results: Vec<Result<(LossBreakdown, Vec<Tensor>)>> = data
        .items
        .par_iter()
        .map(|(_, tokens, targets)| image_gradients(model, tokens, targets))
        .collect();
    let n = data.items.len() as f64;
    let mut sum = LossBreakdown {
        l1: 0.0,
        giou: 0.0,
        focal: 0.0,
        total: 0.0,
    };
    let mut grads: Vec<Tensor> = model.weights().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for r in results {
        let (b, g) = r?;
        sum.l1 += b.l1 / n;
        sum.giou += b.giou / n;
        sum.focal += b.focal / n;
        sum.total += b.total / n;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            for (a, v) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a += v / n;
            }
        }
    }
    Ok((sum, grads))
}

fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Runs `cfg.steps` optimizer steps, calling `on_step` with the updated
/// model after each.
pub fn train(model: &mut Model, data: &TrainingSet, cfg: &TrainConfig, mut on_step: impl FnMut(&StepLog, &Model)) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    let mut opt = AdamW::new(model.weights().tensors());
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (loss, mut grads) = batch_gradients(model, data).map_err(|e| match e.root() {
            Error::NonFinite(_) => Error::Diverged {
                step,
                message: e.to_string(),
            },
            _ => e,
        })?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged {
                step,
                message: format!("loss is {}", loss.total),
            });
        }
        let norm = global_norm(&grads);
        if !norm.is_finite() {
            return Err(Error::Diverged {
                step,
                message: "gradient norm is not finite".into(),
            });
        }
        if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            let s = cfg.clip_norm / norm;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        let lr = cfg.lr_at(step);
        opt.step(model.weights_mut().tensors_mut(), &grads, lr, cfg);
        let log = StepLog {
            step,
            lr,
            loss,
            grad_norm: norm,
        };
        on_step(&log, model);
        logs.push(log);
    }
    Ok(logs)
}

/// Mean loss over the set without updating anything.
pub fn evaluate_loss(model: &Model, data: &TrainingSet) -> Result<LossBreakdown> {
    Ok(batch_gradients(model, data)?.0)
}
