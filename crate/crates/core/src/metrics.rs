//! Triplet recall: mR@K over IoU thresholds, AR, and per-type breakdowns.
//!
//! A prediction is a true positive when both of its boxes reach the IoU
//! threshold against an unmatched ground-truth triplet of the same class;
//! among candidates it claims the one with the best weaker-box overlap.
//! Only each image's `K` most confident distinct predictions take part
//! (an exact repeat of a triplet earns nothing). Recall is
//! pooled over the whole split per class, then averaged over the classes
//! that have ground truth and over the thresholds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde_json::{json, Value};

use crate::boxes::{iou, Corners};
use crate::data::{taxonomy, Arity, BroadType, ImageRecord, TripletPrediction};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub ks: Vec<usize>,
    pub num_classes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: vec![0.25, 0.5, 0.75],
            ks: vec![25, 50, 100],
            num_classes: crate::data::NUM_CLASSES,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() || self.thresholds.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::validation("thresholds", "must be non-empty and ascending"));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::validation("ks", "must be non-empty and positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::validation("num_classes", "must be positive"));
        }
        Ok(())
    }
}

/// Ground-truth triplet in pixel corners.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalTriplet {
    pub individual: Corners,
    pub group: Corners,
    pub atomic: usize,
}

/// Expands a record's triplets into pixel corners.
pub fn eval_triplets(record: &ImageRecord) -> Vec<EvalTriplet> {
    let (w, h) = record.size();
    record
        .expand_triplets()
        .into_iter()
        .map(|t| EvalTriplet {
            individual: t.individual.to_pixels(w, h),
            group: t.group.to_pixels(w, h),
            atomic: t.atomic,
        })
        .collect()
}

/// Indices of the `k` most confident predictions, ties in input order.
pub fn top_k(preds: &[TripletPrediction], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence));
    order.truncate(k);
    order
}

fn same_triplet(a: &TripletPrediction, b: &TripletPrediction) -> bool {
    a.atomic == b.atomic && a.individual == b.individual && a.group == b.group
}

/// The `k` most confident distinct predictions: a triplet repeating an
/// earlier-ranked one (same class, identical boxes) is dropped.
pub fn ranked_distinct(preds: &[TripletPrediction], k: usize) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::with_capacity(k.min(preds.len()));
    for p in top_k(preds, preds.len()) {
        if kept.len() == k {
            break;
        }
        if !kept.iter().any(|&q| same_triplet(&preds[q], &preds[p])) {
            kept.push(p);
        }
    }
    kept
}

/// True-positive flag per prediction of one image (only the top `k`
/// distinct predictions can be positive), plus the ground truth each one
/// claimed.
pub fn match_triplets(preds: &[TripletPrediction], gts: &[EvalTriplet], tau: f64, k: usize) -> (Vec<bool>, Vec<Option<usize>>) {
    let mut flags = vec![false; preds.len()];
    let mut claimed = vec![None; preds.len()];
    let mut used = vec![false; gts.len()];
    for p in ranked_distinct(preds, k) {
        let pred = &preds[p];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.atomic != pred.atomic {
                continue;
            }
            let overlap = iou(pred.individual, gt.individual).min(iou(pred.group, gt.group));
            if overlap >= tau && best.is_none_or(|(_, b)| overlap > b) {
                best = Some((g, overlap));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
            flags[p] = true;
            claimed[p] = Some(g);
        }
    }
    (flags, claimed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub ks: Vec<usize>,
    /// Ground-truth triplets per class.
    pub gt_counts: Vec<usize>,
    /// `recall[k][t][c]`; `None` for classes without ground truth.
    pub recall: Vec<Vec<Vec<Option<f64>>>>,
    /// mR@K per entry of `ks`.
    pub mean_recall: Vec<f64>,
    pub ar: f64,
    /// AR restricted to each broad type's classes; `None` without ground truth.
    pub broad: Vec<(BroadType, Option<f64>)>,
    pub individual: Option<f64>,
    pub group: Option<f64>,
}

impl EvalReport {
    /// AR over a subset of classes: mean over K and τ of the mean recall
    /// of those classes that have ground truth.
    pub fn subset_ar(&self, classes: &[usize]) -> Option<f64> {
        if !classes.iter().any(|&c| self.gt_counts.get(c).is_some_and(|&n| n > 0)) {
            return None;
        }
        let mut total = 0.0;
        for per_k in &self.recall {
            let mut over_tau = 0.0;
            for per_t in per_k {
                let vals: Vec<f64> = classes.iter().filter_map(|&c| per_t[c]).collect();
                over_tau += vals.iter().sum::<f64>() / vals.len() as f64;
            }
            total += over_tau / per_k.len() as f64;
        }
        Some(total / self.recall.len() as f64)
    }

    pub fn mean_recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.mean_recall[i])
    }

    /// Category × τ recall table (at the largest K) with a summary.
    pub fn to_table(&self) -> String {
        let tax = taxonomy();
        let ki = self.ks.len() - 1;
        let mut out = String::new();
        let _ = write!(out, "{:<16} {:>5}", "category", "gt");
        for t in &self.thresholds {
            let _ = write!(out, " {:>8}", format!("R@{t}"));
        }
        let _ = writeln!(out, "   (K={})", self.ks[ki]);
        for (c, &n) in self.gt_counts.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let name = tax.get(c).map_or("?", |e| e.name);
            let _ = write!(out, "{name:<16} {n:>5}");
            for per_t in &self.recall[ki] {
                let _ = write!(out, " {:>8.4}", per_t[c].unwrap_or(0.0));
            }
            let _ = writeln!(out);
        }
        let _ = writeln!(out);
        for (k, m) in self.ks.iter().zip(&self.mean_recall) {
            let _ = writeln!(out, "mR@{k:<4} {m:.4}");
        }
        let _ = writeln!(out, "AR      {:.4}", self.ar);
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        for (b, v) in &self.broad {
            let _ = writeln!(out, "{:<11} {}", b.name(), fmt(*v));
        }
        let _ = writeln!(out, "individual  {}", fmt(self.individual));
        let _ = writeln!(out, "group       {}", fmt(self.group));
        out
    }

    /// Machine-readable summary.
    pub fn to_json(&self) -> Value {
        let tax = taxonomy();
        let mut mr = serde_json::Map::new();
        for (k, m) in self.ks.iter().zip(&self.mean_recall) {
            mr.insert(format!("mR@{k}"), json!(m));
        }
        let broad: BTreeMap<&str, Option<f64>> = self.broad.iter().map(|(b, v)| (b.name(), *v)).collect();
        let mut per_class = serde_json::Map::new();
        for (c, &n) in self.gt_counts.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let name = tax.get(c).map_or_else(|_| c.to_string(), |e| e.name.to_string());
            let by_k: BTreeMap<String, Vec<Option<f64>>> = self
                .ks
                .iter()
                .enumerate()
                .map(|(ki, k)| (format!("K={k}"), self.recall[ki].iter().map(|t| t[c]).collect()))
                .collect();
            per_class.insert(name, json!({"gt": n, "recall": by_k}));
        }
        json!({
            "thresholds": self.thresholds,
            "ks": self.ks,
            "mean_recall": mr,
            "AR": self.ar,
            "broad": broad,
            "individual": self.individual,
            "group": self.group,
            "per_class": per_class,
        })
    }
}

/// mR@K alone.
pub fn mean_recall(preds: &[TripletPrediction], records: &[ImageRecord], k: usize) -> Result<f64> {
    let cfg = EvalConfig {
        ks: vec![k],
        ..EvalConfig::default()
    };
    Ok(evaluate(preds, records, &cfg)?.mean_recall[0])
}

/// Scores predictions against ground truth for every K and τ.
pub fn evaluate(preds: &[TripletPrediction], records: &[ImageRecord], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut ids: Vec<u64> = records.iter().map(|r| r.image_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::validation("image_id", "duplicate image id in ground truth"));
    }
    let mut by_image: BTreeMap<u64, Vec<TripletPrediction>> = BTreeMap::new();
    for p in preds {
        if ids.binary_search(&p.image_id).is_err() {
            return Err(Error::validation(
                "image_id",
                format!("prediction for image {} which has no ground truth", p.image_id),
            ));
        }
        if p.atomic >= cfg.num_classes {
            return Err(Error::validation("atomic", format!("class id {} out of range", p.atomic)));
        }
        by_image.entry(p.image_id).or_default().push(*p);
    }
    let mut sorted: Vec<&ImageRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.image_id);
    let gts: Vec<Vec<EvalTriplet>> = sorted.iter().map(|r| eval_triplets(r)).collect();
    let mut gt_counts = vec![0usize; cfg.num_classes];
    for t in gts.iter().flatten() {
        if t.atomic >= cfg.num_classes {
            return Err(Error::validation("atomic", format!("class id {} out of range", t.atomic)));
        }
        gt_counts[t.atomic] += 1;
    }
    if gt_counts.iter().all(|&n| n == 0) {
        return Err(Error::UndefinedMetric("no ground-truth triplets".into()));
    }

    // tp[k][t][c], folded in image-id order
    let empty = Vec::new();
    let per_image: Vec<Vec<Vec<Vec<usize>>>> = sorted
        .par_iter()
        .zip(gts.par_iter())
        .map(|(r, g)| {
            let p = by_image.get(&r.image_id).unwrap_or(&empty);
            cfg.ks
                .iter()
                .map(|&k| {
                    cfg.thresholds
                        .iter()
                        .map(|&tau| {
                            let mut counts = vec![0usize; cfg.num_classes];
                            let (_, claimed) = match_triplets(p, g, tau, k);
                            for gi in claimed.into_iter().flatten() {
                                counts[g[gi].atomic] += 1;
                            }
                            counts
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut tp = vec![vec![vec![0usize; cfg.num_classes]; cfg.thresholds.len()]; cfg.ks.len()];
    for img in &per_image {
        for (ki, per_k) in img.iter().enumerate() {
            for (ti, per_t) in per_k.iter().enumerate() {
                for (c, n) in per_t.iter().enumerate() {
                    tp[ki][ti][c] += n;
                }
            }
        }
    }
    let recall: Vec<Vec<Vec<Option<f64>>>> = tp
        .iter()
        .map(|per_k| {
            per_k
                .iter()
                .map(|per_t| {
                    per_t
                        .iter()
                        .zip(&gt_counts)
                        .map(|(&n, &g)| (g > 0).then(|| n as f64 / g as f64))
                        .collect()
                })
                .collect()
        })
        .collect();
    let mean_recall: Vec<f64> = recall
        .iter()
        .map(|per_k| {
            per_k
                .iter()
                .map(|per_t| {
                    let vals: Vec<f64> = per_t.iter().flatten().copied().collect();
                    vals.iter().sum::<f64>() / vals.len() as f64
                })
                .sum::<f64>()
                / per_k.len() as f64
        })
        .collect();
    let ar = mean_recall.iter().sum::<f64>() / mean_recall.len() as f64;
    let mut report = EvalReport {
        thresholds: cfg.thresholds.clone(),
        ks: cfg.ks.clone(),
        gt_counts,
        recall,
        mean_recall,
        ar,
        broad: Vec::new(),
        individual: None,
        group: None,
    };
    let tax = taxonomy();
    let in_range = |ids: Vec<usize>| -> Vec<usize> { ids.into_iter().filter(|&c| c < cfg.num_classes).collect() };
    report.broad = BroadType::ALL
        .iter()
        .map(|&b| (b, report.subset_ar(&in_range(tax.ids_of(b).collect()))))
        .collect();
    let by_arity = |a: Arity| in_range(tax.entries().iter().filter(|e| e.arity() == a).map(|e| e.id).collect());
    report.individual = report.subset_ar(&by_arity(Arity::Individual));
    report.group = report.subset_ar(&by_arity(Arity::Group));
    Ok(report)
}
