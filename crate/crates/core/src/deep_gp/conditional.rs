//! Whitened sparse-GP conditionals, KL terms and reparameterized sampling.

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Architecture, BoundArchitecture, BoundUnit, BoundUnitParams, BoundVariational};
use crate::diffnum::{cholesky_jittered, cholesky_on_tape, Matrix, Tape, Var, DEFAULT_JITTER_SCHEDULE};
use crate::error::{Error, Result};
use crate::exact_gp::dynamic_cross;
use crate::lti_gp::BoundLti;
use crate::static_gp::{BoundMean, BoundStatic};

/// Per-point Gaussian marginals of every GP in a layer (`n x width`).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMarginals {
    pub mean: Matrix,
    pub var: Matrix,
}

/// The parts of a unit's conditional that do not depend on its input.
#[derive(Clone, Debug)]
pub(crate) enum UnitPrep<'t> {
    /// `Aᵀμ` and the marginal variance over the row range; only the LTI
    /// mean still depends on the input.
    Dynamic { lti: BoundLti<'t>, a_mu: Var<'t>, var: Var<'t> },
    Static { kernel: BoundStatic<'t>, mean: BoundMean<'t>, zs: Var<'t>, l_zz: Var<'t>, q: BoundVariational<'t> },
}

/// Values of a [`UnitPrep`] that can be replayed on another tape.
#[derive(Clone, Debug)]
pub(crate) enum CachedPrep {
    Dynamic { a_mu: Matrix, var: Matrix },
    Static { zs: Matrix, l_zz: Matrix },
}

/// Marginal variance `k0 − colsum(A²) + colsum((SᵀA)²)` as a column.
fn whitened_variance<'t>(k0: Var<'t>, a: Var<'t>, s: Var<'t>) -> Var<'t> {
    let sa = s.t().matmul(a);
    k0 - a.square().sum_rows().t() + sa.square().sum_rows().t()
}

/// Cholesky factor of `K(Z, Z)` for a unit; shared by every row range.
#[derive(Clone, Copy, Debug)]
pub(crate) enum InducingFactor<'t> {
    Dynamic { l_zz: Var<'t> },
    Static { zs: Var<'t>, l_zz: Var<'t> },
}

pub(crate) fn factor_inducing<'t>(unit: &BoundUnit<'t>) -> Result<InducingFactor<'t>> {
    match &unit.params {
        BoundUnitParams::Dynamic { lti, inducing } => {
            let (l_zz, _) = cholesky_on_tape(dynamic_cross(lti, inducing, inducing), &DEFAULT_JITTER_SCHEDULE)?;
            Ok(InducingFactor::Dynamic { l_zz })
        }
        BoundUnitParams::Static { kernel, inducing, .. } => {
            let zs = kernel.whiten(*inducing);
            let (l_zz, _) = cholesky_on_tape(kernel.cross_whitened(zs, zs), &DEFAULT_JITTER_SCHEDULE)?;
            Ok(InducingFactor::Static { zs, l_zz })
        }
    }
}

pub(crate) fn prepare_rows<'t>(unit: &BoundUnit<'t>, factor: &InducingFactor<'t>, rows: Range<usize>) -> UnitPrep<'t> {
    match (&unit.params, factor) {
        (BoundUnitParams::Dynamic { lti, inducing }, InducingFactor::Dynamic { l_zz }) => {
            let idx: Vec<usize> = rows.collect();
            let a = l_zz.solve_lower(dynamic_cross(lti, inducing, &idx), false);
            let k0 = lti.kernel_at_lags(&Matrix::scalar(0.0));
            UnitPrep::Dynamic { lti: *lti, a_mu: a.t().matmul(unit.q.mean), var: whitened_variance(k0, a, unit.q.chol) }
        }
        (BoundUnitParams::Static { kernel, mean, .. }, InducingFactor::Static { zs, l_zz }) => {
            UnitPrep::Static { kernel: *kernel, mean: *mean, zs: *zs, l_zz: *l_zz, q: unit.q }
        }
        _ => unreachable!("inducing factor does not match the unit kind"),
    }
}

pub(crate) fn prepare_unit<'t>(unit: &BoundUnit<'t>, rows: Range<usize>) -> Result<UnitPrep<'t>> {
    Ok(prepare_rows(unit, &factor_inducing(unit)?, rows))
}

pub(crate) fn cache_prep(prep: &UnitPrep<'_>) -> CachedPrep {
    match prep {
        UnitPrep::Dynamic { a_mu, var, .. } => CachedPrep::Dynamic { a_mu: a_mu.to_matrix(), var: var.to_matrix() },
        UnitPrep::Static { zs, l_zz, .. } => CachedPrep::Static { zs: zs.to_matrix(), l_zz: l_zz.to_matrix() },
    }
}

pub(crate) fn restore_prep<'t>(tape: &'t Tape, unit: &BoundUnit<'t>, cached: &CachedPrep) -> UnitPrep<'t> {
    match (&unit.params, cached) {
        (BoundUnitParams::Dynamic { lti, .. }, CachedPrep::Dynamic { a_mu, var }) => {
            UnitPrep::Dynamic { lti: *lti, a_mu: tape.constant(a_mu.clone()), var: tape.constant(var.clone()) }
        }
        (BoundUnitParams::Static { kernel, mean, .. }, CachedPrep::Static { zs, l_zz }) => UnitPrep::Static {
            kernel: *kernel,
            mean: *mean,
            zs: tape.constant(zs.clone()),
            l_zz: tape.constant(l_zz.clone()),
            q: unit.q,
        },
        _ => unreachable!("cached preparation does not match the unit kind"),
    }
}

/// Last `rows` rows of `v`.
pub(crate) fn trailing<'t>(v: Var<'t>, rows: usize) -> Var<'t> {
    let n = v.rows();
    if n == rows {
        v
    } else {
        v.rows_range(n - rows, n)
    }
}

/// Mean and variance columns of one unit given its input rows. A dynamic
/// unit prepared on fewer rows than its input keeps the trailing rows.
pub(crate) fn unit_marginals<'t>(prep: &UnitPrep<'t>, input: Var<'t>) -> (Var<'t>, Var<'t>) {
    match prep {
        UnitPrep::Dynamic { lti, a_mu, var } => (trailing(lti.mean_on_window(input), a_mu.rows()) + *a_mu, *var),
        UnitPrep::Static { kernel, mean, zs, l_zz, q } => {
            let xs = kernel.whiten(input);
            let a = l_zz.solve_lower(kernel.cross_whitened(*zs, xs), false);
            let m = mean.eval(input) + a.t().matmul(q.mean);
            (m, whitened_variance(kernel.scale, a, q.chol))
        }
    }
}

pub(crate) fn layer_marginals<'t>(tape: &'t Tape, preps: &[UnitPrep<'t>], input: Var<'t>) -> (Var<'t>, Var<'t>) {
    let parts: Vec<(Var<'t>, Var<'t>)> = preps.iter().map(|p| unit_marginals(p, input)).collect();
    if parts.len() == 1 {
        return parts[0];
    }
    let means: Vec<Var<'t>> = parts.iter().map(|p| p.0).collect();
    let vars: Vec<Var<'t>> = parts.iter().map(|p| p.1).collect();
    (tape.concat(&means, 1), tape.concat(&vars, 1))
}

/// `mean + √var·ε` with `ε` drawn from `rng`. Variances below `-1e-10` are
/// an error; smaller negatives are shifted to zero.
pub(crate) fn sample_on_tape<'t>(tape: &'t Tape, mean: Var<'t>, var: Var<'t>, rng: &mut impl Rng) -> Result<Var<'t>> {
    let [r, c] = var.shape();
    let lowest = var.value().as_slice().iter().copied().fold(f64::INFINITY, f64::min);
    if lowest < -1e-10 || lowest.is_nan() {
        return Err(Error::Numerical(format!("marginal variance {lowest:e} is negative")));
    }
    let shift = tape.scalar((-lowest).max(0.0) + 1e-12);
    let eps = tape.constant(Matrix::from_fn(r, c, |_, _| rng.sample(StandardNormal)));
    Ok(mean + (var + shift).sqrt() * eps)
}

pub fn sample_layer(marginals: &GaussianMarginals, rng: &mut impl Rng) -> Result<Matrix> {
    let tape = Tape::new();
    let s = sample_on_tape(&tape, tape.constant(marginals.mean.clone()), tape.constant(marginals.var.clone()), rng)?;
    Ok(s.to_matrix())
}

/// `KL(N(μ, SSᵀ) ‖ N(0, I))` in whitened coordinates.
pub(crate) fn kl_whitened<'t>(q: &BoundVariational<'t>) -> Var<'t> {
    let m = q.mean.rows() as f64;
    let tape = q.mean.tape();
    (q.chol.square().sum() + q.mean.square().sum() - tape.scalar(m)).scale(0.5) - q.chol.diag().ln().sum()
}

/// `KL(N(q_mean, q_chol q_cholᵀ) ‖ N(prior_mean, k_zz))`.
pub fn kl_term(q_mean: &[f64], q_chol: &Matrix, prior_mean: &[f64], k_zz: &Matrix) -> Result<f64> {
    let m = q_mean.len();
    if q_chol.shape() != [m, m] || k_zz.shape() != [m, m] || prior_mean.len() != m {
        return Err(Error::Shape { op: "kl_term", detail: format!("inconsistent sizes for {m} inducing points") });
    }
    let l = cholesky_jittered(k_zz, &DEFAULT_JITTER_SCHEDULE)?.factor;
    let diff = Matrix::column(prior_mean.iter().zip(q_mean).map(|(a, b)| a - b).collect());
    let trace = l.solve_lower(&q_chol.lower_triangle()).as_slice().iter().map(|v| v * v).sum::<f64>();
    let quad = l.solve_lower(&diff).as_slice().iter().map(|v| v * v).sum::<f64>();
    let logdet_k: f64 = l.diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let logdet_q: f64 = q_chol.diagonal().iter().map(|v| 2.0 * v.abs().ln()).sum();
    Ok(0.5 * (trace + quad - m as f64 + logdet_k - logdet_q))
}

/// Marginals of layer `layer` for input rows that sit at grid indices
/// `start..start + inputs.rows()` (the dynamic mean starts from zero state at
/// `start`).
pub fn layer_conditional(arch: &Architecture, layer: usize, inputs: &Matrix, start: usize) -> Result<GaussianMarginals> {
    let widths = arch.input_widths();
    if layer >= arch.layers.len() {
        return Err(Error::Contract(format!("layer {layer} does not exist")));
    }
    if inputs.cols() != widths[layer] {
        return Err(Error::Shape { op: "layer_conditional", detail: format!("{} input columns, layer expects {}", inputs.cols(), widths[layer]) });
    }
    let tape = Tape::new();
    let bound: BoundArchitecture<'_> = arch.bind(&tape, false, false);
    let rows = start..start + inputs.rows();
    let preps = bound.layers[layer].units.iter().map(|u| prepare_unit(u, rows.clone())).collect::<Result<Vec<_>>>()?;
    let (m, v) = layer_marginals(&tape, &preps, tape.constant(inputs.clone()));
    Ok(GaussianMarginals { mean: m.to_matrix(), var: v.to_matrix() })
}
