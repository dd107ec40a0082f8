//! Multi-scale hypergraphs over query embeddings and hyperedge convolution.
//!
//! Topology is computed once per forward pass from a cosine affinity matrix
//! and is not differentiated through. At scale 1 every vertex is its own
//! hyperedge; at scale `s > 1` vertex `i` seeds hyperedge `e_i`, which adds
//! the `s - 1` vertices contributing most to the L1,1 density of the
//! selected sub-matrix (largest `|A_ij|`, lowest index on ties).

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Largest vertex count accepted by [`exhaustive_hyperedges`].
pub const EXHAUSTIVE_LIMIT: usize = 12;

/// Binary vertex × hyperedge incidence with cached degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceMatrix {
    vertices: usize,
    edges: usize,
    entries: Vec<bool>,
    vertex_degrees: Vec<usize>,
    edge_degrees: Vec<usize>,
}

impl IncidenceMatrix {
    /// Builds from row-major 0/1 entries.
    pub fn from_entries(vertices: usize, edges: usize, entries: &[u8]) -> Result<Self> {
        if entries.len() != vertices * edges {
            return Err(Error::contract(format!(
                "incidence needs {} entries, got {}",
                vertices * edges,
                entries.len()
            )));
        }
        if let Some(bad) = entries.iter().find(|&&e| e > 1) {
            return Err(Error::contract(format!("incidence entry {bad} is not binary")));
        }
        let entries: Vec<bool> = entries.iter().map(|&e| e == 1).collect();
        Ok(Self::from_bools(vertices, edges, entries))
    }

    fn from_bools(vertices: usize, edges: usize, entries: Vec<bool>) -> Self {
        let mut vertex_degrees = vec![0; vertices];
        let mut edge_degrees = vec![0; edges];
        for v in 0..vertices {
            for e in 0..edges {
                if entries[v * edges + e] {
                    vertex_degrees[v] += 1;
                    edge_degrees[e] += 1;
                }
            }
        }
        IncidenceMatrix {
            vertices,
            edges,
            entries,
            vertex_degrees,
            edge_degrees,
        }
    }

    /// One hyperedge per vertex, each holding only that vertex.
    pub fn identity(n: usize) -> Self {
        let mut entries = vec![false; n * n];
        for i in 0..n {
            entries[i * n + i] = true;
        }
        Self::from_bools(n, n, entries)
    }

    /// Hyperedge `e` holds `members[e]`.
    pub fn from_hyperedges(vertices: usize, members: &[Vec<usize>]) -> Result<Self> {
        let edges = members.len();
        let mut entries = vec![false; vertices * edges];
        for (e, set) in members.iter().enumerate() {
            for &v in set {
                if v >= vertices {
                    return Err(Error::contract(format!(
                        "hyperedge {e} names vertex {v} of {vertices}"
                    )));
                }
                entries[v * edges + e] = true;
            }
        }
        Ok(Self::from_bools(vertices, edges, entries))
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices
    }

    pub fn edge_count(&self) -> usize {
        self.edges
    }

    pub fn contains(&self, vertex: usize, edge: usize) -> bool {
        self.entries[vertex * self.edges + edge]
    }

    pub fn vertex_degrees(&self) -> &[usize] {
        &self.vertex_degrees
    }

    pub fn edge_degrees(&self) -> &[usize] {
        &self.edge_degrees
    }

    /// Sorted member list of hyperedge `e`.
    pub fn members(&self, edge: usize) -> Vec<usize> {
        (0..self.vertices).filter(|&v| self.contains(v, edge)).collect()
    }

    /// Recomputes degrees from the entries and compares with the cache.
    pub fn degrees_consistent(&self) -> bool {
        let fresh = Self::from_bools(self.vertices, self.edges, self.entries.clone());
        fresh.vertex_degrees == self.vertex_degrees && fresh.edge_degrees == self.edge_degrees
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.entries.iter().map(|&b| b as u8 as f64).collect();
        Tensor::new(vec![self.vertices, self.edges], data).unwrap()
    }

    /// `D_v^{-1/2} H D_e^{-1} Hᵀ D_v^{-1/2}` as a dense `N×N` matrix, with
    /// the inverse of a zero degree taken as zero.
    pub fn propagation_operator(&self) -> Tensor {
        let inv = |d: usize, f: fn(f64) -> f64| if d == 0 { 0.0 } else { f(d as f64) };
        let dv: Vec<f64> = self.vertex_degrees.iter().map(|&d| inv(d, |x| 1.0 / x.sqrt())).collect();
        let de: Vec<f64> = self.edge_degrees.iter().map(|&d| inv(d, |x| 1.0 / x)).collect();
        let n = self.vertices;
        let mut op = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                let shared: f64 = (0..self.edges)
                    .filter(|&e| self.contains(i, e) && self.contains(j, e))
                    .map(|e| de[e])
                    .sum();
                if shared != 0.0 {
                    op.set(i, j, dv[i] * shared * dv[j]);
                }
            }
        }
        op
    }
}

/// Cosine similarity between every pair of rows. Exactly symmetric with a
/// unit diagonal.
pub fn cosine_affinity(embeddings: &Tensor) -> Result<Tensor> {
    if embeddings.rank() != 2 {
        return Err(Error::contract("affinity needs an N×C matrix"));
    }
    let n = embeddings.rows();
    let norms: Vec<f64> = (0..n)
        .map(|i| embeddings.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if let Some(row) = norms.iter().position(|&v| v == 0.0) {
        return Err(Error::DegenerateEmbedding { row });
    }
    let mut a = Tensor::eye(n);
    for i in 0..n {
        for j in i + 1..n {
            let dot: f64 = embeddings.row(i).iter().zip(embeddings.row(j)).map(|(x, y)| x * y).sum();
            let c = dot / (norms[i] * norms[j]);
            a.set(i, j, c);
            a.set(j, i, c);
        }
    }
    Ok(a)
}

fn check_affinity(affinity: &Tensor) -> Result<usize> {
    if affinity.rank() != 2 || affinity.rows() != affinity.cols() {
        return Err(Error::contract(format!(
            "affinity must be square, got {:?}",
            affinity.shape()
        )));
    }
    Ok(affinity.rows())
}

/// Greedy vertex-centric hyperedges at scale `s >= 2`.
pub fn build_scale_hyperedges(affinity: &Tensor, scale: usize) -> Result<IncidenceMatrix> {
    if scale < 2 {
        return Err(Error::contract(format!(
            "greedy construction needs scale >= 2, got {scale} (scale 1 is the identity)"
        )));
    }
    let n = check_affinity(affinity)?;
    let size = scale.min(n);
    let members: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| {
                let (wa, wb) = (affinity.get(i, a).abs(), affinity.get(i, b).abs());
                wb.total_cmp(&wa).then(a.cmp(&b))
            });
            let mut set: Vec<usize> = others.into_iter().take(size - 1).collect();
            set.push(i);
            set.sort_unstable();
            set
        })
        .collect();
    IncidenceMatrix::from_hyperedges(n, &members)
}

/// `‖A_{O,O}‖₁,₁` summed in ascending member order.
pub fn subset_density(affinity: &Tensor, members: &[usize]) -> f64 {
    let mut sorted = members.to_vec();
    sorted.sort_unstable();
    sorted
        .iter()
        .flat_map(|&p| sorted.iter().map(move |&q| (p, q)))
        .map(|(p, q)| affinity.get(p, q).abs())
        .sum()
}

/// Exact maximum-density hyperedges by enumeration; ties go to the
/// lexicographically smallest member set.
pub fn exhaustive_hyperedges(affinity: &Tensor, scale: usize) -> Result<IncidenceMatrix> {
    let n = check_affinity(affinity)?;
    if n > EXHAUSTIVE_LIMIT {
        return Err(Error::TooLarge {
            vertices: n,
            limit: EXHAUSTIVE_LIMIT,
        });
    }
    if scale == 0 {
        return Err(Error::contract("scale must be positive"));
    }
    let size = scale.min(n);
    let combos = combinations(n, size);
    let members: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut best: Option<(f64, &Vec<usize>)> = None;
            for c in combos.iter().filter(|c| c.contains(&i)) {
                let d = subset_density(affinity, c);
                if best.is_none_or(|(bd, _)| d > bd) {
                    best = Some((d, c));
                }
            }
            best.unwrap().1.clone()
        })
        .collect();
    IncidenceMatrix::from_hyperedges(n, &members)
}

/// All `k`-subsets of `0..n` in lexicographic order.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current: Vec<usize> = (0..k).collect();
    loop {
        out.push(current.clone());
        let Some(pos) = (0..k).rev().find(|&p| current[p] < n - k + p) else {
            return out;
        };
        current[pos] += 1;
        for q in pos + 1..k {
            current[q] = current[q - 1] + 1;
        }
    }
}

/// Per-scale incidences over one shared vertex set.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleHypergraph {
    scales: Vec<IncidenceMatrix>,
    vertex_count: usize,
}

impl MultiScaleHypergraph {
    /// Scale 1 is the identity; scales `2..=max_scale` are greedy.
    pub fn from_affinity(affinity: &Tensor, max_scale: usize) -> Result<Self> {
        let n = check_affinity(affinity)?;
        if max_scale == 0 {
            return Err(Error::contract("at least one scale is required"));
        }
        let mut scales = vec![IncidenceMatrix::identity(n)];
        for s in 2..=max_scale {
            scales.push(build_scale_hyperedges(affinity, s)?);
        }
        Ok(MultiScaleHypergraph { scales, vertex_count: n })
    }

    pub fn from_embeddings(embeddings: &Tensor, max_scale: usize) -> Result<Self> {
        Self::from_affinity(&cosine_affinity(embeddings)?, max_scale)
    }

    pub fn scales(&self) -> &[IncidenceMatrix] {
        &self.scales
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }
}

/// One hyperedge convolution: `σ(D_v^{-1/2} H D_e^{-1} Hᵀ D_v^{-1/2} V θ)`.
pub fn hyperedge_conv(
    tape: &mut Tape,
    incidence: &IncidenceMatrix,
    vertices: Var,
    theta: Var,
    activate: bool,
) -> Result<Var> {
    let rows = tape.value(vertices).shape()[0];
    if incidence.vertex_count() != rows {
        return Err(Error::Dimension {
            op: "hyperedge_conv",
            left: vec![incidence.vertex_count(), incidence.edge_count()],
            right: tape.value(vertices).shape().to_vec(),
        });
    }
    conv_with_operator(tape, &incidence.propagation_operator(), vertices, theta, activate)
}

/// Convolution with a precomputed propagation operator.
pub fn conv_with_operator(
    tape: &mut Tape,
    operator: &Tensor,
    vertices: Var,
    theta: Var,
    activate: bool,
) -> Result<Var> {
    let projected = tape.matmul(vertices, theta)?;
    let op = tape.constant(operator.clone());
    let mixed = tape.matmul(op, projected)?;
    if activate {
        tape.relu(mixed)
    } else {
        Ok(mixed)
    }
}

/// Two-layer perceptron with a relu hidden layer.
#[derive(Debug, Clone, Copy)]
pub struct MlpParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl MlpParams {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.w1)?;
        let h = tape.add_row(h, self.b1)?;
        let h = tape.relu(h)?;
        let y = tape.matmul(h, self.w2)?;
        tape.add_row(y, self.b2)
    }
}

/// Learnable state of one hypergraph branch: `theta[s][l]` plus the
/// cross-scale aggregator.
#[derive(Debug, Clone)]
pub struct BranchParams {
    pub theta: Vec<Vec<Var>>,
    pub mlp: MlpParams,
}

/// Runs `layers` convolutions per scale, concatenates the terminal
/// embeddings along channels and aggregates them with the MLP.
pub fn multi_scale_forward(
    tape: &mut Tape,
    initial: Var,
    graphs: &MultiScaleHypergraph,
    params: &BranchParams,
    layers: usize,
) -> Result<Var> {
    let scale_count = graphs.scales().len();
    if params.theta.len() != scale_count || params.theta.iter().any(|t| t.len() != layers) {
        return Err(Error::contract(format!(
            "branch weights shaped {:?} do not match {scale_count} scales × {layers} layers",
            params.theta.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    let channels = tape.value(initial).cols();
    let w1 = tape.value(params.mlp.w1).shape();
    if w1 != [scale_count * channels, channels] {
        return Err(Error::contract(format!(
            "aggregator input weight {w1:?} must be [{}, {channels}]",
            scale_count * channels
        )));
    }
    let mut terminal = Vec::with_capacity(scale_count);
    for (incidence, thetas) in graphs.scales().iter().zip(&params.theta) {
        let operator = incidence.propagation_operator();
        let mut v = initial;
        for (l, &theta) in thetas.iter().enumerate() {
            v = conv_with_operator(tape, &operator, v, theta, l + 1 < layers)?;
        }
        terminal.push(v);
    }
    let stacked = tape.concat(&terminal, 1)?;
    params.mlp.forward(tape, stacked)
}

/// Text dump of an affinity matrix and every scale's incidence, one
/// space-separated row-major block per matrix.
pub fn dump_text(label: &str, affinity: &Tensor, graphs: &MultiScaleHypergraph) -> String {
    let mut out = String::new();
    let n = affinity.rows();
    let _ = writeln!(out, "# {label} affinity {n}x{n}");
    for i in 0..n {
        let row: Vec<String> = affinity.row(i).iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    for (s, h) in graphs.scales().iter().enumerate() {
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "# {label} incidence scale={} {}x{}",
            s + 1,
            h.vertex_count(),
            h.edge_count()
        );
        for v in 0..h.vertex_count() {
            let row: Vec<&str> = (0..h.edge_count())
                .map(|e| if h.contains(v, e) { "1" } else { "0" })
                .collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
    }
    out
}
