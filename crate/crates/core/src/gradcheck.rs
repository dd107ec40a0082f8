//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Max over coordinates of `|autodiff - central| / max(1, |central|)` for
/// a scalar function of one tensor.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let errors = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), step)?;
    Ok(errors[0])
}

/// Per-input max relative error for a scalar function of several tensors.
pub fn grad_check_many<F>(f: F, points: &[Tensor], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut work = points.to_vec();
    let mut errors = Vec::with_capacity(points.len());
    for (t, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, points[t].shape());
        let mut worst: f64 = 0.0;
        for i in 0..points[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[t].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
        errors.push(worst);
    }
    Ok(errors)
}
