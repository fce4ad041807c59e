//! Horseshoe shrinkage prior on diffusion matrices.

use crate::diffnum::{Matrix, Var};
use crate::error::{Error, Result};

const FLOOR: f64 = 1e-12;

/// `Σ log log(1 + 2τ²/x²)`, the closed-form surrogate of the horseshoe
/// log-density (additive constants dropped). `|x|` is floored at `1e-12`.
pub fn horseshoe_log_prior(values: &[f64], scale: f64) -> Result<f64> {
    if !(scale > 0.0) {
        return Err(Error::Domain { op: "horseshoe_log_prior", detail: format!("scale {scale} must be positive") });
    }
    let t2 = 2.0 * scale * scale;
    Ok(values.iter().map(|&x| (t2 / x.abs().max(FLOOR).powi(2)).ln_1p().ln()).sum())
}

/// Tape version of [`horseshoe_log_prior`] over every entry of `x`.
pub fn horseshoe_log_prior_on_tape<'t>(x: Var<'t>, scale: f64) -> Var<'t> {
    let tape = x.tape();
    let [r, c] = x.shape();
    let floor = tape.constant(Matrix::filled(r, c, FLOOR * FLOOR));
    let ratio = tape.scalar(2.0 * scale * scale) / (x.square() + floor);
    (ratio + tape.scalar(1.0)).ln().ln().sum()
}
