//! Slow, straight-line reference implementations. Each one is written
//! without calling the routine it checks.

use crate::data::{ImageRecord, TripletPrediction};
use crate::loss::CostMatrix;

/// Minimum total and the lexicographically smallest optimal pair list
/// (sorted by row), by enumerating every injection of the smaller side.
pub fn brute_force_assignment(cost: &CostMatrix) -> (f64, Vec<(usize, usize)>) {
    let (m, n) = (cost.rows(), cost.cols());
    let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
    let mut consider = |mut pairs: Vec<(usize, usize)>| {
        pairs.sort_unstable();
        let total: f64 = pairs.iter().map(|&(r, c)| cost.get(r, c)).sum();
        let better = match &best {
            None => true,
            Some((t, p)) => total < *t || (total == *t && pairs < *p),
        };
        if better {
            best = Some((total, pairs));
        }
    };
    if m <= n {
        let mut used = vec![false; n];
        let mut chosen = Vec::with_capacity(m);
        injections(m, n, &mut used, &mut chosen, &mut |cols: &[usize]| {
            consider(cols.iter().enumerate().map(|(r, &c)| (r, c)).collect())
        });
    } else {
        let mut used = vec![false; m];
        let mut chosen = Vec::with_capacity(n);
        injections(n, m, &mut used, &mut chosen, &mut |rows: &[usize]| {
            consider(rows.iter().enumerate().map(|(c, &r)| (r, c)).collect())
        });
    }
    best.unwrap_or((0.0, Vec::new()))
}

fn injections(k: usize, n: usize, used: &mut [bool], chosen: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
    if chosen.len() == k {
        visit(chosen);
        return;
    }
    for j in 0..n {
        if !used[j] {
            used[j] = true;
            chosen.push(j);
            injections(k, n, used, chosen, visit);
            chosen.pop();
            used[j] = false;
        }
    }
}

type Matrix = Vec<Vec<f64>>;

fn mat_mul(a: &Matrix, b: &Matrix) -> Matrix {
    let inner = b.len();
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| (0..cols).map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum()).collect())
        .collect()
}

fn transpose(a: &Matrix) -> Matrix {
    let cols = a.first().map_or(0, Vec::len);
    (0..cols).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

fn diag(d: &[f64]) -> Matrix {
    (0..d.len()).map(|i| (0..d.len()).map(|j| if i == j { d[i] } else { 0.0 }).collect()).collect()
}

/// `σ(D_v^{-1/2} H D_e^{-1} Hᵀ D_v^{-1/2} V θ)` evaluated one factor at a
/// time with plain nested loops. `incidence` is `N×M` of zeros and ones.
pub fn dense_conv(incidence: &Matrix, v: &Matrix, theta: &Matrix, activate: bool) -> Matrix {
    let inv = |d: f64, f: fn(f64) -> f64| if d == 0.0 { 0.0 } else { f(d) };
    let dv: Vec<f64> = incidence.iter().map(|r| inv(r.iter().sum(), |x| 1.0 / x.sqrt())).collect();
    let de: Vec<f64> = transpose(incidence).iter().map(|c| inv(c.iter().sum(), |x| 1.0 / x)).collect();
    let dv = diag(&dv);
    let left = mat_mul(&mat_mul(&dv, incidence), &diag(&de));
    let op = mat_mul(&mat_mul(&left, &transpose(incidence)), &dv);
    let out = mat_mul(&mat_mul(&op, v), theta);
    if activate {
        out.into_iter().map(|r| r.into_iter().map(|x| x.max(0.0)).collect()).collect()
    } else {
        out
    }
}

/// Greedy scale-`s` incidence: vertex `i` plus the `min(s, N) - 1` others
/// with the largest `|A_ij|`, ties to the lower index.
pub fn greedy_incidence(affinity: &Matrix, s: usize) -> Matrix {
    let n = affinity.len();
    let mut h = vec![vec![0.0; n]; n];
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| affinity[i][b].abs().total_cmp(&affinity[i][a].abs()).then(a.cmp(&b)));
        h[i][i] = 1.0;
        for &j in others.iter().take(s.min(n) - 1) {
            h[j][i] = 1.0;
        }
    }
    h
}

/// Cosine similarity with nested loops.
pub fn cosine(v: &Matrix) -> Matrix {
    let norms: Vec<f64> = v.iter().map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    (0..v.len())
        .map(|i| {
            (0..v.len())
                .map(|j| {
                    if i == j {
                        1.0
                    } else {
                        v[i].iter().zip(&v[j]).map(|(a, b)| a * b).sum::<f64>() / (norms[i] * norms[j])
                    }
                })
                .collect()
        })
        .collect()
}

/// Weights of one straight-line hypergraph branch.
pub struct BranchWeights {
    /// `theta[s][l]`, each `C×C`.
    pub theta: Vec<Vec<Matrix>>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Builds the scales from `v0`'s own cosine affinity, convolves, stacks
/// and aggregates.
pub fn multi_scale(v0: &Matrix, w: &BranchWeights) -> Matrix {
    let n = v0.len();
    let affinity = cosine(v0);
    let layers = w.theta.first().map_or(0, Vec::len);
    let mut terminal = Vec::new();
    for (s, thetas) in w.theta.iter().enumerate() {
        let h = if s == 0 { diag(&vec![1.0; n]) } else { greedy_incidence(&affinity, s + 1) };
        let mut v = v0.clone();
        for (l, theta) in thetas.iter().enumerate() {
            v = dense_conv(&h, &v, theta, l + 1 < layers);
        }
        terminal.push(v);
    }
    let stacked: Matrix = (0..n).map(|i| terminal.iter().flat_map(|t| t[i].clone()).collect()).collect();
    let add_bias = |m: Matrix, b: &[f64]| -> Matrix {
        m.into_iter().map(|r| r.into_iter().zip(b).map(|(x, y)| x + y).collect()).collect()
    };
    let hidden = add_bias(mat_mul(&stacked, &w.w1), &w.b1);
    let hidden: Matrix = hidden.into_iter().map(|r| r.into_iter().map(|x| x.max(0.0)).collect()).collect();
    add_bias(mat_mul(&hidden, &w.w2), &w.b2)
}

fn overlap(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Per-K, per-τ, per-class recall, mR per K, and AR.
pub struct BruteReport {
    pub recall: Vec<Vec<Vec<Option<f64>>>>,
    pub mean_recall: Vec<f64>,
    pub ar: f64,
}

/// Recomputes the whole metric with a quadratic matcher: for every
/// `(K, τ)` and image, rank by confidence with an insertion sort, keep the
/// first K that do not repeat an earlier triplet,
/// and let each kept prediction claim the best unclaimed same-class
/// ground truth whose weaker box overlap reaches τ.
pub fn brute_force_evaluate(preds: &[TripletPrediction], records: &[ImageRecord], thresholds: &[f64], ks: &[usize], num_classes: usize) -> BruteReport {
    let mut images: Vec<&ImageRecord> = records.iter().collect();
    images.sort_by_key(|r| r.image_id);
    // (class, individual, group) in pixel corners
    let gts: Vec<Vec<(usize, [f64; 4], [f64; 4])>> = images
        .iter()
        .map(|r| {
            let (w, h) = (r.width as f64, r.height as f64);
            let px = |b: crate::BBox| {
                [(b.cx - b.w / 2.0) * w, (b.cy - b.h / 2.0) * h, (b.cx + b.w / 2.0) * w, (b.cy + b.h / 2.0) * h]
            };
            let mut out = Vec::new();
            for g in &r.groups {
                for &m in &g.members {
                    let ind = px(r.individuals[m]);
                    let grp = if g.members.len() == 1 { ind } else { px(g.bbox) };
                    out.push((g.atomic, ind, grp));
                }
            }
            out
        })
        .collect();
    let mut counts = vec![0usize; num_classes];
    for g in gts.iter().flatten() {
        counts[g.0] += 1;
    }

    let mut recall = Vec::new();
    for &k in ks {
        let mut per_k = Vec::new();
        for &tau in thresholds {
            let mut hits = vec![0usize; num_classes];
            for (img, gt) in images.iter().zip(&gts) {
                let mut ranked: Vec<&TripletPrediction> = Vec::new();
                for p in preds.iter().filter(|p| p.image_id == img.image_id) {
                    let mut at = ranked.len();
                    while at > 0 && ranked[at - 1].confidence < p.confidence {
                        at -= 1;
                    }
                    ranked.insert(at, p);
                }
                let mut distinct: Vec<&TripletPrediction> = Vec::new();
                for p in ranked {
                    let repeat = distinct
                        .iter()
                        .any(|q| q.atomic == p.atomic && q.individual == p.individual && q.group == p.group);
                    if !repeat && distinct.len() < k {
                        distinct.push(p);
                    }
                }
                let mut taken = vec![false; gt.len()];
                for p in distinct {
                    let mut pick: Option<usize> = None;
                    let mut pick_score = f64::NEG_INFINITY;
                    for (j, g) in gt.iter().enumerate() {
                        if taken[j] || g.0 != p.atomic {
                            continue;
                        }
                        let score = overlap(p.individual.to_array(), g.1).min(overlap(p.group.to_array(), g.2));
                        if score >= tau && score > pick_score {
                            pick = Some(j);
                            pick_score = score;
                        }
                    }
                    if let Some(j) = pick {
                        taken[j] = true;
                        hits[gt[j].0] += 1;
                    }
                }
            }
            per_k.push((0..num_classes).map(|c| (counts[c] > 0).then(|| hits[c] as f64 / counts[c] as f64)).collect::<Vec<_>>());
        }
        recall.push(per_k);
    }
    let mean_recall: Vec<f64> = recall
        .iter()
        .map(|per_k: &Vec<Vec<Option<f64>>>| {
            let mut over_tau = 0.0;
            for per_t in per_k {
                let present: Vec<f64> = per_t.iter().flatten().copied().collect();
                over_tau += present.iter().sum::<f64>() / present.len() as f64;
            }
            over_tau / per_k.len() as f64
        })
        .collect();
    let ar = mean_recall.iter().sum::<f64>() / mean_recall.len() as f64;
    BruteReport { recall, mean_recall, ar }
}
