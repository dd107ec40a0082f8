//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] owns every intermediate value of a forward pass. Operations
//! append a node holding the result plus whatever the local backward rule
//! needs, so node order is a topological order by construction.
//! [`Tape::backward`] walks the nodes once in reverse.
//!
//! ```
//! use nvidehr::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{axis_split, matmul_nt_into, matmul_tn_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    AddRow(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Min(Var, Var),
    Max(Var, Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    Concat(Vec<Var>, usize),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    Sum(Var),
    /// Elementwise loss whose local derivative was computed during forward.
    Pointwise(Var, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of `shape` when no path reached it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A grad-enabled leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(&[a, b]);
        self.push(value, Op::MatMul(a, b), needs, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let needs = self.needs(&[a, b]);
        self.push(value, Op::Add(a, b), needs, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let needs = self.needs(&[a, b]);
        self.push(value, Op::Sub(a, b), needs, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let needs = self.needs(&[a, b]);
        self.push(value, Op::Mul(a, b), needs, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_with(self.value(b), "div", |x, y| x / y)?;
        let needs = self.needs(&[a, b]);
        self.push(value, Op::Div(a, b), needs, "div")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.affine(a, c, 0.0)
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let value = self.value(a).map(|v| scale * v + shift);
        let needs = self.needs(&[a]);
        self.push(value, Op::Affine(a, scale), needs, "affine")
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if x.rank() != 2 || b.len() != x.cols() {
            return Err(dim_err("add_row", x, b));
        }
        let n = x.cols();
        let mut value = x.clone();
        for row in value.data_mut().chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let needs = self.needs(&[a, bias]);
        self.push(value, Op::AddRow(a, bias), needs, "add_row")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).relu();
        let needs = self.needs(&[a]);
        self.push(value, Op::Relu(a), needs, "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).sigmoid();
        let needs = self.needs(&[a]);
        self.push(value, Op::Sigmoid(a), needs, "sigmoid")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        let needs = self.needs(&[a]);
        self.push(value, Op::Exp(a), needs, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::ln);
        let needs = self.needs(&[a]);
        self.push(value, Op::Log(a), needs, "log")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::abs);
        let needs = self.needs(&[a]);
        self.push(value, Op::Abs(a), needs, "abs")
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_with(self.value(b), "minimum", f64::min)?;
        let needs = self.needs(&[a, b]);
        self.push(value, Op::Min(a, b), needs, "minimum")
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_with(self.value(b), "maximum", f64::max)?;
        let needs = self.needs(&[a, b]);
        self.push(value, Op::Max(a, b), needs, "maximum")
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = self.value(a).softmax(axis)?;
        let needs = self.needs(&[a]);
        self.push(value, Op::Softmax(a, axis), needs, "softmax")
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        for p in [gain, bias] {
            if self.value(p).len() != n {
                return Err(dim_err("layer_norm", xv, self.value(p)));
            }
        }
        let mut normalized = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.len() / n);
        for row in normalized.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv_std.push(s);
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut value = normalized.clone();
        for row in value.data_mut().chunks_mut(n) {
            for ((v, gv), bv) in row.iter_mut().zip(g).zip(b) {
                *v = *v * gv + bv;
            }
        }
        let needs = self.needs(&[x, gain, bias]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            needs,
            "layer_norm",
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let needs = self.needs(&[a]);
        self.push(value, Op::Transpose(a), needs, "transpose")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat(&values, axis)?;
        let needs = self.needs(parts);
        self.push(value, Op::Concat(parts.to_vec(), axis), needs, "concat")
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 || start >= end || end > x.cols() {
            return Err(Error::contract(format!(
                "slice_cols {start}..{end} out of range for shape {:?}",
                x.shape()
            )));
        }
        let (r, c) = (x.rows(), x.cols());
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&x.data()[i * c + start..i * c + end]);
        }
        let value = Tensor::new(vec![r, w], data)?;
        let needs = self.needs(&[a]);
        self.push(value, Op::SliceCols(a, start), needs, "slice_cols")
    }

    /// Gathers rows by index (repeats allowed).
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 || rows.is_empty() || rows.iter().any(|&r| r >= x.rows()) {
            return Err(Error::contract(format!(
                "select_rows {rows:?} invalid for shape {:?}",
                x.shape()
            )));
        }
        let c = x.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(x.row(r));
        }
        let value = Tensor::new(vec![rows.len(), c], data)?;
        let needs = self.needs(&[a]);
        self.push(value, Op::SelectRows(a, rows.to_vec()), needs, "select_rows")
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        let needs = self.needs(&[a]);
        self.push(value, Op::Sum(a), needs, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Records an elementwise map whose value and derivative the caller
    /// supplies. Used for fused, numerically careful losses.
    pub(crate) fn pointwise(&mut self, a: Var, value: Tensor, derivative: Tensor, name: &'static str) -> Result<Var> {
        debug_assert_eq!(value.shape(), self.value(a).shape());
        let needs = self.needs(&[a]);
        self.push(value, Op::Pointwise(a, derivative), needs, name)
    }

    /// Gradients of a one-element `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for k in (0..=loss.0).rev() {
            let Some(g) = grads[k].take() else { continue };
            let node = &self.nodes[k];
            if node.needs_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
            grads[k] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].needs_grad;

        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if need(*a) {
                    let mut d = vec![0.0; m * k];
                    matmul_nt_into(g.data(), bv.data(), &mut d, m, n, k);
                    acc(*a, Tensor::new(vec![m, k], d).unwrap());
                }
                if need(*b) {
                    let mut d = vec![0.0; k * n];
                    matmul_tn_into(av.data(), g.data(), &mut d, m, k, n);
                    acc(*b, Tensor::new(vec![k, n], d).unwrap());
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    acc(*a, g.mul(val(*b)).unwrap());
                }
                if need(*b) {
                    acc(*b, g.mul(val(*a)).unwrap());
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if need(*a) {
                    acc(*a, g.zip_with(bv, "div", |gv, y| gv / y).unwrap());
                }
                if need(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let t = g.mul(out).unwrap();
                    acc(*b, t.zip_with(bv, "div", |tv, y| -tv / y).unwrap());
                }
            }
            Op::Affine(a, s) => acc(*a, g.scale(*s)),
            Op::AddRow(a, bias) => {
                acc(*a, g.clone());
                if need(*bias) {
                    let n = g.cols();
                    let mut d = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (dv, gv) in d.iter_mut().zip(row) {
                            *dv += gv;
                        }
                    }
                    acc(*bias, Tensor::new(val(*bias).shape().to_vec(), d).unwrap());
                }
            }
            Op::Relu(a) => {
                acc(*a, g.zip_with(val(*a), "relu", |gv, x| if x > 0.0 { gv } else { 0.0 }).unwrap());
            }
            Op::Sigmoid(a) => {
                acc(*a, g.zip_with(out, "sigmoid", |gv, y| gv * y * (1.0 - y)).unwrap());
            }
            Op::Exp(a) => acc(*a, g.mul(out).unwrap()),
            Op::Log(a) => acc(*a, g.zip_with(val(*a), "log", |gv, x| gv / x).unwrap()),
            Op::Abs(a) => {
                acc(*a, g.zip_with(val(*a), "abs", |gv, x| gv * x.signum() * (x != 0.0) as u8 as f64).unwrap());
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let is_min = matches!(op, Op::Min(..));
                let take_a: Vec<bool> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(x, y)| if is_min { x <= y } else { x >= y })
                    .collect();
                let mut da = g.clone();
                let mut db = g.clone();
                for ((pa, pb), &t) in da.data_mut().iter_mut().zip(db.data_mut()).zip(&take_a) {
                    if t {
                        *pb = 0.0;
                    } else {
                        *pa = 0.0;
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let mut d = vec![0.0; out.len()];
                let (y, gd) = (out.data(), g.data());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let dot: f64 = (0..len).map(|k| gd[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            d[at(k)] = y[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                acc(*a, Tensor::new(out.shape().to_vec(), d).unwrap());
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let n = out.cols();
                let gv = val(*gain).data();
                if need(*x) {
                    let mut d = vec![0.0; out.len()];
                    for (r, &s) in inv_std.iter().enumerate() {
                        let span = r * n..(r + 1) * n;
                        let xh = &normalized.data()[span.clone()];
                        let gr = &g.data()[span.clone()];
                        let dxh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_d = dxh.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for (j, dv) in d[span].iter_mut().enumerate() {
                            *dv = s * (dxh[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    acc(*x, Tensor::new(out.shape().to_vec(), d).unwrap());
                }
                if need(*gain) || need(*bias) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for (grow, xrow) in g.data().chunks(n).zip(normalized.data().chunks(n)) {
                        for j in 0..n {
                            dg[j] += grow[j] * xrow[j];
                            db[j] += grow[j];
                        }
                    }
                    acc(*gain, Tensor::new(val(*gain).shape().to_vec(), dg).unwrap());
                    acc(*bias, Tensor::new(val(*bias).shape().to_vec(), db).unwrap());
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose().unwrap()),
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = axis_split(out.shape(), *axis);
                let total = out.shape()[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let shape = val(*p).shape().to_vec();
                    let chunk = shape[*axis] * inner;
                    if need(*p) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let start = o * total + offset;
                            d.extend_from_slice(&g.data()[start..start + chunk]);
                        }
                        acc(*p, Tensor::new(shape, d).unwrap());
                    }
                    offset += chunk;
                }
            }
            Op::SliceCols(a, start) => {
                let src = val(*a);
                let (r, c, w) = (src.rows(), src.cols(), out.cols());
                let mut d = Tensor::zeros(src.shape());
                for i in 0..r {
                    d.data_mut()[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                }
                acc(*a, d);
            }
            Op::SelectRows(a, rows) => {
                let src = val(*a);
                let c = src.cols();
                let mut d = Tensor::zeros(src.shape());
                for (k, &r) in rows.iter().enumerate() {
                    for (dv, gv) in d.data_mut()[r * c..(r + 1) * c].iter_mut().zip(g.row(k)) {
                        *dv += gv;
                    }
                }
                acc(*a, d);
            }
            Op::Sum(a) => {
                acc(*a, Tensor::full(val(*a).shape(), g.item()));
            }
            Op::Pointwise(a, derivative) => acc(*a, g.mul(derivative).unwrap()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        assert_eq!(tape.backward(y).unwrap().get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.mul(x, c).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 5.0);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn overflow_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1000.0));
        assert!(matches!(tape.exp(x), Err(Error::NonFinite("exp"))));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let a = tape.affine(x, 3.0, 1.0).unwrap();
        let b = tape.add(a, x).unwrap();
        let g = tape.backward(b).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 4.0);
    }
}
