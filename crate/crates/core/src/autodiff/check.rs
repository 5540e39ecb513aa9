//! Finite-difference oracles for the tape.

use ndarray::Array2;

use super::tape::{Matrix, Tape, Var};
use crate::error::{Error, Result};

/// `|a - b| / max(1, |a|, |b|)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

fn eval_scalar<F>(expr: &F, inputs: &[Matrix]) -> Result<f64>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = expr(&vars)?;
    tape.check_finite()?;
    Ok(out.item())
}

/// Compares tape gradients of a scalar expression over matrix inputs against
/// central differences. Returns the largest [`rel_error`] over all entries.
pub fn gradient_check<F>(expr: F, inputs: &[Matrix], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    if step <= 0.0 {
        return Err(Error::InvalidSpec("finite-difference step must be positive".into()));
    }
    let analytic: Vec<Matrix> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = expr(&vars)?;
        let ids: Vec<_> = vars.iter().map(|v| v.id()).collect();
        let grads = tape.grad(out.id(), &ids)?;
        grads.iter().map(|g| tape.value(*g).clone()).collect()
    };
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for idx in ndarray::indices(grad.dim()) {
            let orig = probe[k][idx];
            probe[k][idx] = orig + step;
            let up = eval_scalar(&expr, &probe)?;
            probe[k][idx] = orig - step;
            let down = eval_scalar(&expr, &probe)?;
            probe[k][idx] = orig;
            let fd = (up - down) / (2.0 * step);
            worst = worst.max(rel_error(grad[idx], fd));
        }
    }
    Ok(worst)
}

/// Checks a scalar expression of scalar inputs at `point`.
///
/// `order = 1` compares the tape gradient with central differences of `f`.
/// `order = 2` compares the Hessian obtained by differentiating the tape
/// gradient with the four-point central-difference Hessian of `f`.
pub fn finite_diff_check<F>(expr: F, point: &[f64], order: u8, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let inputs: Vec<Matrix> = point.iter().map(|&v| Array2::from_elem((1, 1), v)).collect();
    match order {
        1 => gradient_check(expr, &inputs, step),
        2 => hessian_check(expr, point, step),
        _ => Err(Error::InvalidSpec(format!("unsupported derivative order {order}"))),
    }
}

fn hessian_check<F>(expr: F, point: &[f64], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    if step <= 0.0 {
        return Err(Error::InvalidSpec("finite-difference step must be positive".into()));
    }
    let n = point.len();
    let mut hess = Array2::<f64>::zeros((n, n));
    {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = point.iter().map(|&v| tape.scalar(v)).collect();
        let ids: Vec<_> = vars.iter().map(|v| v.id()).collect();
        let out = expr(&vars)?;
        let grads = tape.grad(out.id(), &ids)?;
        for (i, g) in grads.iter().enumerate() {
            let row = tape.grad(*g, &ids)?;
            for (j, h) in row.iter().enumerate() {
                hess[[i, j]] = tape.value(*h)[[0, 0]];
            }
        }
    }
    let f = |x: &[f64]| -> Result<f64> {
        let m: Vec<Matrix> = x.iter().map(|&v| Array2::from_elem((1, 1), v)).collect();
        eval_scalar(&expr, &m)
    };
    let mut worst: f64 = 0.0;
    let mut x = point.to_vec();
    for i in 0..n {
        for j in 0..n {
            let mut corner = |si: f64, sj: f64| -> Result<f64> {
                x.copy_from_slice(point);
                x[i] += si * step;
                x[j] += sj * step;
                f(&x)
            };
            let fd = (corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)?
                + corner(-1.0, -1.0)?)
                / (4.0 * step * step);
            worst = worst.max(rel_error(hess[[i, j]], fd));
        }
    }
    Ok(worst)
}
