//! Central-difference verification of tape gradients.

use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Relative discrepancy with a unit floor on the denominator, so that
/// near-zero gradients are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn evaluate<F>(f: &F, point: &[Matrix]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = point.iter().map(|m| tape.constant(m.clone())).collect();
    let out = f(&tape, &leaves)?;
    let v = out.item();
    if !v.is_finite() {
        return Err(Error::Domain { op: "check_gradient", detail: format!("function value {v} is not finite") });
    }
    Ok(v)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with the given `step`, coordinate by coordinate, and
/// returns the largest [`relative_error`].
pub fn check_gradient<F>(f: F, point: &[Matrix], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = point.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = f(&tape, &leaves)?;
    if !out.item().is_finite() {
        return Err(Error::Domain { op: "check_gradient", detail: "function value is not finite".into() });
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Matrix> = leaves.iter().map(|&l| grads.wrt(l)).collect();

    let mut worst: f64 = 0.0;
    let mut probe = point.to_vec();
    for (p, g) in analytic.iter().enumerate() {
        for k in 0..g.len() {
            let orig = probe[p].as_slice()[k];
            probe[p].as_mut_slice()[k] = orig + step;
            let up = evaluate(&f, &probe)?;
            probe[p].as_mut_slice()[k] = orig - step;
            let down = evaluate(&f, &probe)?;
            probe[p].as_mut_slice()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(g.as_slice()[k], numeric));
        }
    }
    Ok(worst)
}
