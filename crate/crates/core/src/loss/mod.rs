//! Set-prediction training objective: bipartite matching of queries to
//! ground truth, then weighted L1 + GIoU box losses and a focal
//! classification loss.

mod focal;
mod hungarian;

pub use focal::{focal_loss, focal_terms, FocalParams};
pub use hungarian::{hungarian, Assignment, CostMatrix};

use crate::boxes::{giou, BBox};
use crate::data::{GtTriplet, ImageRecord};
use crate::error::{Error, Result};
use crate::model::ModelOutput;
use crate::tape::{Tape, Var};
use crate::tensor::{sigmoid, Tensor};

/// Weight of each of the two boxes (individual, group) in the box losses.
/// `0.5` averages them; `1.0` would sum them.
pub const BOX_PAIR_WEIGHT: f64 = 0.5;

/// Loss weights λ₁ (L1), λ₂ (GIoU), λ₃ (focal) plus focal parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub l1: f64,
    pub giou: f64,
    pub focal: f64,
    pub focal_params: FocalParams,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            l1: 2.5,
            giou: 1.0,
            focal: 2.0,
            focal_params: FocalParams::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_l1", self.l1), ("lambda_giou", self.giou), ("lambda_focal", self.focal)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(name, format!("must be a finite value >= 0, got {v}")));
            }
        }
        self.focal_params.validate()
    }
}

/// One supervision target: a pair of boxes and every interaction class
/// annotated on exactly that pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchTarget {
    pub individual: BBox,
    pub group: BBox,
    pub classes: Vec<usize>,
}

impl From<&GtTriplet> for MatchTarget {
    fn from(t: &GtTriplet) -> Self {
        MatchTarget {
            individual: t.individual,
            group: t.group,
            classes: vec![t.atomic],
        }
    }
}

/// Targets for one image. Triplets of the same person with the same group
/// box share a query, so their classes merge into one multi-hot target.
pub fn match_targets(record: &ImageRecord) -> Vec<MatchTarget> {
    let mut keys: Vec<(usize, BBox)> = Vec::new();
    let mut out: Vec<MatchTarget> = Vec::new();
    for t in record.expand_triplets() {
        match keys.iter().position(|&(m, g)| m == t.member && g == t.group) {
            Some(i) => {
                if !out[i].classes.contains(&t.atomic) {
                    out[i].classes.push(t.atomic);
                }
            }
            None => {
                keys.push((t.member, t.group));
                out.push(MatchTarget::from(&t));
            }
        }
    }
    for t in &mut out {
        t.classes.sort_unstable();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l1: f64,
    pub giou: f64,
    pub focal: f64,
    pub total: f64,
}

/// A differentiable loss plus its parts and the assignment it used.
#[derive(Debug, Clone)]
pub struct SetLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub assignment: Assignment,
}

fn l1_mean(a: &BBox, b: &BBox) -> f64 {
    a.to_array().iter().zip(b.to_array()).map(|(x, y)| (x - y).abs()).sum::<f64>() / 4.0
}

/// `cost[i][j]` of pairing query `i` with target `j`; mirrors the loss weights.
pub fn matching_cost(tape: &Tape, out: &ModelOutput, targets: &[MatchTarget], cfg: &LossConfig) -> Result<CostMatrix> {
    let hs = out.individual_boxes(tape);
    let gs = out.group_boxes(tape);
    let logits = tape.value(out.logits);
    let k = logits.cols();
    if let Some(bad) = targets.iter().flat_map(|t| &t.classes).find(|&&c| c >= k) {
        return Err(Error::contract(format!("target class {bad} but only {k} logits")));
    }
    let n = hs.len();
    let mut data = Vec::with_capacity(n * targets.len());
    for i in 0..n {
        for t in targets {
            let l1 = BOX_PAIR_WEIGHT * (l1_mean(&hs[i], &t.individual) + l1_mean(&gs[i], &t.group));
            let g = BOX_PAIR_WEIGHT
                * ((1.0 - giou(hs[i].corners(), t.individual.corners()))
                    + (1.0 - giou(gs[i].corners(), t.group.corners())));
            let p = t.classes.iter().map(|&c| sigmoid(logits.get(i, c))).sum::<f64>() / t.classes.len().max(1) as f64;
            data.push(cfg.l1 * l1 + cfg.giou * g + cfg.focal * (1.0 - p));
        }
    }
    CostMatrix::new(n, targets.len(), data)
}

fn column(tape: &mut Tape, v: Var, c: usize) -> Result<Var> {
    tape.slice_cols(v, c, c + 1)
}

/// GIoU per row between predicted `P×4` center boxes and fixed targets.
pub fn giou_rows(tape: &mut Tape, pred: Var, targets: &[BBox]) -> Result<Var> {
    let p = targets.len();
    let col = |f: fn(&crate::boxes::Corners) -> f64| {
        Tensor::new(vec![p, 1], targets.iter().map(|t| f(&t.corners())).collect())
    };
    let tx1 = tape.constant(col(|c| c.x1)?);
    let ty1 = tape.constant(col(|c| c.y1)?);
    let tx2 = tape.constant(col(|c| c.x2)?);
    let ty2 = tape.constant(col(|c| c.y2)?);
    let t_area = tape.constant(col(|c| c.area())?);

    let cx = column(tape, pred, 0)?;
    let cy = column(tape, pred, 1)?;
    let w = column(tape, pred, 2)?;
    let h = column(tape, pred, 3)?;
    let hw = tape.scale(w, 0.5)?;
    let hh = tape.scale(h, 0.5)?;
    let x1 = tape.sub(cx, hw)?;
    let x2 = tape.add(cx, hw)?;
    let y1 = tape.sub(cy, hh)?;
    let y2 = tape.add(cy, hh)?;

    let span = |tape: &mut Tape, lo_a, lo_b, hi_a, hi_b, inner: bool| -> Result<Var> {
        let (hi, lo) = if inner {
            (tape.minimum(hi_a, hi_b)?, tape.maximum(lo_a, lo_b)?)
        } else {
            (tape.maximum(hi_a, hi_b)?, tape.minimum(lo_a, lo_b)?)
        };
        tape.sub(hi, lo)
    };
    let iw = span(tape, x1, tx1, x2, tx2, true)?;
    let iw = tape.relu(iw)?;
    let ih = span(tape, y1, ty1, y2, ty2, true)?;
    let ih = tape.relu(ih)?;
    let inter = tape.mul(iw, ih)?;
    let area = tape.mul(w, h)?;
    let total = tape.add(area, t_area)?;
    let union = tape.sub(total, inter)?;
    let iou = tape.div(inter, union)?;
    let ew = span(tape, x1, tx1, x2, tx2, false)?;
    let eh = span(tape, y1, ty1, y2, ty2, false)?;
    let enclosing = tape.mul(ew, eh)?;
    let slack = tape.sub(enclosing, union)?;
    let penalty = tape.div(slack, enclosing)?;
    tape.sub(iou, penalty)
}

fn box_losses(tape: &mut Tape, pred: Var, rows: &[usize], targets: &[BBox]) -> Result<(Var, Var)> {
    let chosen = tape.select_rows(pred, rows)?;
    let flat: Vec<f64> = targets.iter().flat_map(|b| b.to_array()).collect();
    let target = tape.constant(Tensor::new(vec![targets.len(), 4], flat)?);
    let diff = tape.sub(chosen, target)?;
    let abs = tape.abs(diff)?;
    let l1 = tape.mean(abs)?;
    let g = giou_rows(tape, chosen, targets)?;
    let mean_g = tape.mean(g)?;
    let giou_loss = tape.affine(mean_g, -1.0, 1.0)?;
    Ok((l1, giou_loss))
}

/// Matches queries to targets and returns `λ₁·L1 + λ₂·L_GIoU + λ₃·L_focal`.
/// Box losses cover matched pairs only; every query receives a class
/// target (all zeros when unmatched).
pub fn total_loss(tape: &mut Tape, out: &ModelOutput, targets: &[MatchTarget], cfg: &LossConfig) -> Result<SetLoss> {
    let cost = matching_cost(tape, out, targets, cfg)?;
    let assignment = hungarian(&cost)?;
    let logits = tape.value(out.logits);
    let (n, k) = (logits.rows(), logits.cols());

    let mut class_targets = Tensor::zeros(&[n, k]);
    for &(i, j) in &assignment.pairs {
        for &c in &targets[j].classes {
            class_targets.set(i, c, 1.0);
        }
    }
    let focal = focal_loss(tape, out.logits, &class_targets, cfg.focal_params)?;

    let (l1, giou_loss) = if assignment.pairs.is_empty() {
        let zero = tape.constant(Tensor::scalar(0.0));
        (zero, zero)
    } else {
        let rows: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
        let ind: Vec<BBox> = assignment.pairs.iter().map(|p| targets[p.1].individual).collect();
        let grp: Vec<BBox> = assignment.pairs.iter().map(|p| targets[p.1].group).collect();
        let (l1_h, g_h) = box_losses(tape, out.boxes_h, &rows, &ind)?;
        let (l1_g, g_g) = box_losses(tape, out.boxes_g, &rows, &grp)?;
        let l1 = tape.add(l1_h, l1_g)?;
        let l1 = tape.scale(l1, BOX_PAIR_WEIGHT)?;
        let g = tape.add(g_h, g_g)?;
        let g = tape.scale(g, BOX_PAIR_WEIGHT)?;
        (l1, g)
    };

    let a = tape.scale(l1, cfg.l1)?;
    let b = tape.scale(giou_loss, cfg.giou)?;
    let c = tape.scale(focal, cfg.focal)?;
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    let breakdown = LossBreakdown {
        l1: tape.value(l1).item(),
        giou: tape.value(giou_loss).item(),
        focal: tape.value(focal).item(),
        total: tape.value(total).item(),
    };
    Ok(SetLoss {
        total,
        breakdown,
        assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::taxonomy::BroadType;
    use crate::data::Group;
    use crate::gradcheck::grad_check_many;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn output(tape: &mut Tape, h: Tensor, g: Tensor, logits: Tensor) -> ModelOutput {
        ModelOutput {
            boxes_h: tape.param(h),
            boxes_g: tape.param(g),
            logits: tape.param(logits),
        }
    }

    fn boxes_tensor(b: &[BBox]) -> Tensor {
        Tensor::new(vec![b.len(), 4], b.iter().flat_map(|x| x.to_array()).collect()).unwrap()
    }

    fn random_box(rng: &mut ChaCha8Rng) -> BBox {
        BBox::new(
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.1..0.4),
            rng.gen_range(0.1..0.4),
        )
    }

    fn random_targets(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<MatchTarget> {
        (0..n)
            .map(|_| MatchTarget {
                individual: random_box(rng),
                group: random_box(rng),
                classes: vec![rng.gen_range(0..k)],
            })
            .collect()
    }

    #[test]
    fn perfect_fit_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let targets = random_targets(&mut rng, 2, 5);
        let mut logits = Tensor::full(&[3, 5], -20.0);
        let mut h = vec![random_box(&mut rng); 3];
        let mut g = h.clone();
        for (j, t) in targets.iter().enumerate() {
            h[j] = t.individual;
            g[j] = t.group;
            logits.set(j, t.classes[0], 20.0);
        }
        let mut tape = Tape::new();
        let out = output(&mut tape, boxes_tensor(&h), boxes_tensor(&g), logits);
        let loss = total_loss(&mut tape, &out, &targets, &LossConfig::default()).unwrap();
        assert!(loss.breakdown.total < 1e-4, "{:?}", loss.breakdown);
        assert_eq!(loss.assignment.pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn zeroed_box_weights_leave_focal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let targets = random_targets(&mut rng, 2, 4);
        let h: Vec<BBox> = (0..4).map(|_| random_box(&mut rng)).collect();
        let g: Vec<BBox> = (0..4).map(|_| random_box(&mut rng)).collect();
        let logits = Tensor::new(vec![4, 4], (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let cfg = LossConfig {
            l1: 0.0,
            giou: 0.0,
            ..LossConfig::default()
        };
        let mut tape = Tape::new();
        let out = output(&mut tape, boxes_tensor(&h), boxes_tensor(&g), logits);
        let b = total_loss(&mut tape, &out, &targets, &cfg).unwrap().breakdown;
        assert_eq!(b.total, cfg.focal * b.focal);
        let weighted = cfg.l1 * b.l1 + cfg.giou * b.giou + cfg.focal * b.focal;
        assert!((b.total - weighted).abs() < 1e-12);
    }

    #[test]
    fn identical_targets_give_identical_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_targets(&mut rng, 1, 3).remove(0);
        let targets = vec![t.clone(), t];
        let h: Vec<BBox> = (0..3).map(|_| random_box(&mut rng)).collect();
        let mut tape = Tape::new();
        let out = output(&mut tape, boxes_tensor(&h), boxes_tensor(&h), Tensor::zeros(&[3, 3]));
        let c = matching_cost(&tape, &out, &targets, &LossConfig::default()).unwrap();
        for i in 0..3 {
            assert_eq!(c.get(i, 0), c.get(i, 1));
        }
    }

    #[test]
    fn empty_targets_still_train_classes() {
        let mut tape = Tape::new();
        let b = [BBox::new(0.5, 0.5, 0.2, 0.2)];
        let out = output(&mut tape, boxes_tensor(&b), boxes_tensor(&b), Tensor::zeros(&[1, 3]));
        let cost = matching_cost(&tape, &out, &[], &LossConfig::default()).unwrap();
        assert_eq!((cost.rows(), cost.cols()), (1, 0));
        let loss = total_loss(&mut tape, &out, &[], &LossConfig::default()).unwrap();
        assert_eq!(loss.breakdown.l1, 0.0);
        assert!(loss.breakdown.focal > 0.0);
        let grads = tape.backward(loss.total).unwrap();
        assert!(grads.get(out.logits).unwrap().data().iter().all(|g| *g > 0.0));
    }

    #[test]
    fn giou_rows_matches_scalar_giou() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p: Vec<BBox> = (0..6).map(|_| random_box(&mut rng)).collect();
        let t: Vec<BBox> = (0..6).map(|_| random_box(&mut rng)).collect();
        let mut tape = Tape::new();
        let v = tape.constant(boxes_tensor(&p));
        let g = giou_rows(&mut tape, v, &t).unwrap();
        for i in 0..6 {
            let want = giou(p[i].corners(), t[i].corners());
            assert!((tape.value(g).data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let targets = random_targets(&mut rng, 2, 3);
        let raw = |rng: &mut ChaCha8Rng, n: usize| {
            Tensor::new(vec![n / 4, 4], (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
        };
        let points = vec![
            raw(&mut rng, 12),
            raw(&mut rng, 12),
            Tensor::new(vec![3, 3], (0..9).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap(),
        ];
        let errs = grad_check_many(
            |tape, v| {
                let out = ModelOutput {
                    boxes_h: tape.sigmoid(v[0])?,
                    boxes_g: tape.sigmoid(v[1])?,
                    logits: v[2],
                };
                Ok(total_loss(tape, &out, &targets, &LossConfig::default())?.total)
            },
            &points,
            1e-6,
        )
        .unwrap();
        assert!(errs.iter().all(|e| *e < 1e-4), "{errs:?}");
    }

    #[test]
    fn merges_triplets_sharing_boxes() {
        let p = BBox::new(0.2, 0.5, 0.1, 0.3);
        let q = BBox::new(0.6, 0.5, 0.1, 0.3);
        let cover = crate::boxes::Corners::cover([p.corners(), q.corners()]).unwrap().normalized(1.0, 1.0);
        let group = |members: Vec<usize>, broad, atomic, bbox| Group {
            members,
            broad,
            atomic,
            bbox,
        };
        let record = ImageRecord {
            image_id: 0,
            width: 100,
            height: 100,
            individuals: vec![p, q],
            groups: vec![
                group(vec![0, 1], BroadType::Gaze, 1, cover),
                group(vec![0, 1], BroadType::Touch, 3, cover),
                group(vec![0], BroadType::Expression, 8, p),
                group(vec![0], BroadType::Gesture, 13, p),
            ],
        };
        record.validate().unwrap();
        let t = match_targets(&record);
        assert_eq!(t.len(), 3);
        assert_eq!(t[0].classes, vec![1, 3]);
        assert_eq!(t[2].classes, vec![8, 13]);
        assert_eq!(t[2].group, p);
    }
}
