use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{sigmoid, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { alpha: 0.25, gamma: 2.0 }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::validation("focal_alpha", format!("must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::validation("focal_gamma", format!("must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Loss and its derivative for one logit `x` with binary target `t`.
///
/// Positive: `α (1-p)^γ · softplus(-x)`, i.e. `-α (1-p)^γ log p`.
/// Negative: `(1-α) p^γ · softplus(x)`.
pub fn focal_terms(x: f64, positive: bool, params: FocalParams) -> (f64, f64) {
    let FocalParams { alpha, gamma } = params;
    let p = sigmoid(x);
    let q = sigmoid(-x);
    if positive {
        let sp = softplus(-x);
        let m = q.powf(gamma);
        (alpha * m * sp, alpha * (-gamma * p * m * sp - m * q))
    } else {
        let sp = softplus(x);
        let m = p.powf(gamma);
        ((1.0 - alpha) * m * sp, (1.0 - alpha) * (gamma * q * m * sp + m * p))
    }
}

/// Sigmoid focal loss summed over all entries and divided by the number of
/// rows holding at least one positive (minimum 1).
pub fn focal_loss(tape: &mut Tape, logits: Var, targets: &Tensor, params: FocalParams) -> Result<Var> {
    let x = tape.value(logits);
    if x.shape() != targets.shape() {
        return Err(Error::Dimension {
            op: "focal_loss",
            left: x.shape().to_vec(),
            right: targets.shape().to_vec(),
        });
    }
    if targets.data().iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::contract("focal targets must be 0 or 1"));
    }
    let mut value = Vec::with_capacity(x.len());
    let mut deriv = Vec::with_capacity(x.len());
    for (&xv, &t) in x.data().iter().zip(targets.data()) {
        let (v, d) = focal_terms(xv, t == 1.0, params);
        value.push(v);
        deriv.push(d);
    }
    let shape = x.shape().to_vec();
    let cols = targets.cols();
    let positive_rows = targets
        .data()
        .chunks(cols)
        .filter(|row| row.contains(&1.0))
        .count();
    let elementwise = tape.pointwise(
        logits,
        Tensor::new(shape.clone(), value)?,
        Tensor::new(shape, deriv)?,
        "focal_loss",
    )?;
    let total = tape.sum(elementwise)?;
    tape.scale(total, 1.0 / positive_rows.max(1) as f64)
}
