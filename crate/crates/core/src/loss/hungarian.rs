//! Minimum-cost assignment with a deterministic choice among optima.
//!
//! The rectangular problem is padded to a square one with zero-cost dummy
//! rows or columns and solved with the shortest-augmenting-path Hungarian
//! method. Its dual potentials identify every edge that can appear in some
//! optimal assignment (zero reduced cost). The lexicographically smallest
//! optimal pair list is then assembled greedily, checking each candidate
//! pair with a bipartite perfect-matching test on those tight edges.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dense cost matrix that may have zero rows or columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "{rows}x{cols} cost matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged cost rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

impl From<&Tensor> for CostMatrix {
    fn from(t: &Tensor) -> Self {
        CostMatrix {
            rows: t.rows(),
            cols: t.cols(),
            data: t.data().to_vec(),
        }
    }
}

/// Prediction ↔ ground-truth pairs plus the predictions left over.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    /// `(prediction, ground truth)`, sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

impl Assignment {
    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(r, c)| cost.get(r, c)).sum()
    }

    /// Ground truth matched to each prediction.
    pub fn target_of(&self, prediction: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == prediction).map(|p| p.1)
    }
}

/// Square Hungarian method; returns row potentials, column potentials and
/// the column assigned to each row.
fn solve_square(n: usize, cost: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    // 1-based arrays; index 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let reduced = cost[(r0 - 1) * n + col - 1] - u[r0] - v[col];
                if reduced < min_to[col] {
                    min_to[col] = reduced;
                    way[col] = col0;
                }
                if min_to[col] < delta {
                    delta = min_to[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    min_to[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            owner[col0] = owner[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for col in 1..=n {
        row_to_col[owner[col] - 1] = col - 1;
    }
    (u[1..].to_vec(), v[1..].to_vec(), row_to_col)
}

/// Kuhn's augmenting-path test for a perfect matching of `rows` onto the
/// columns not in `taken`.
fn has_perfect_matching(
    rows: &[usize],
    size: usize,
    taken: &[bool],
    allowed: &dyn Fn(usize, usize) -> bool,
) -> bool {
    fn augment(
        r: usize,
        size: usize,
        taken: &[bool],
        allowed: &dyn Fn(usize, usize) -> bool,
        seen: &mut [bool],
        col_owner: &mut [Option<usize>],
    ) -> bool {
        for c in 0..size {
            if taken[c] || seen[c] || !allowed(r, c) {
                continue;
            }
            seen[c] = true;
            let free = match col_owner[c] {
                None => true,
                Some(other) => augment(other, size, taken, allowed, seen, col_owner),
            };
            if free {
                col_owner[c] = Some(r);
                return true;
            }
        }
        false
    }
    let mut col_owner = vec![None; size];
    for &r in rows {
        let mut seen = vec![false; size];
        if !augment(r, size, taken, allowed, &mut seen, &mut col_owner) {
            return false;
        }
    }
    true
}

/// Minimum-total-cost assignment of `min(rows, cols)` pairs. Among optimal
/// assignments the lexicographically smallest sorted pair list wins.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    if let Some(bad) = cost.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::contract(format!("assignment cost {bad} is not finite")));
    }
    let (m, n) = (cost.rows, cost.cols);
    if m == 0 || n == 0 {
        return Ok(Assignment {
            pairs: vec![],
            unmatched: (0..m).collect(),
        });
    }
    let k = m.max(n);
    let mut padded = vec![0.0; k * k];
    for r in 0..m {
        for c in 0..n {
            padded[r * k + c] = cost.get(r, c);
        }
    }
    let (u, v, _) = solve_square(k, &padded);
    let scale = cost.data.iter().fold(1.0_f64, |a, b| a.max(b.abs()));
    let eps = 1e-9 * scale;
    let tight: Vec<bool> = (0..k * k)
        .map(|idx| padded[idx] - u[idx / k] - v[idx % k] <= eps)
        .collect();

    let target = m.min(n);
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(target);
    let mut row_done = vec![false; k];
    let mut col_taken = vec![false; k];
    let mut next_row = 0;
    while pairs.len() < target {
        let mut chosen = None;
        'search: for i in next_row..m {
            for j in 0..n {
                if col_taken[j] || !tight[i * k + j] {
                    continue;
                }
                col_taken[j] = true;
                // rows at or before i that are not paired go to dummy columns
                let forced_dummy = |r: usize| r <= i && r < m;
                let remaining: Vec<usize> = (0..k).filter(|&r| !row_done[r] && r != i).collect();
                let allowed = |r: usize, c: usize| tight[r * k + c] && (!forced_dummy(r) || c >= n);
                let ok = has_perfect_matching(&remaining, k, &col_taken, &allowed);
                col_taken[j] = false;
                if ok {
                    chosen = Some((i, j));
                    break 'search;
                }
            }
        }
        let (i, j) = chosen.expect("an optimal assignment always exists");
        pairs.push((i, j));
        row_done[i] = true;
        col_taken[j] = true;
        next_row = i + 1;
    }
    let matched: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    Ok(Assignment {
        unmatched: (0..m).filter(|r| !matched.contains(r)).collect(),
        pairs,
    })
}
