//! Mean and stationary covariance of stochastic LTI systems whose state
//! matrix is complex diagonal (pairs of conjugate modes).
//!
//! The system is a sum of independent two-state blocks. Block `j` has a
//! complex pole `λ_j` (with `Re λ_j < 0`), input row `B_j`, diffusion row
//! `L_j` and output weight `c_j`; its conjugate twin is implicit. The output
//! of block `j` is `2 Re(c_j x_j)`, so every quantity below is real.

pub mod dense;
pub mod diff;

use nalgebra::{DMatrix, Matrix2};
use num_complex::Complex64;

use crate::diffnum::Matrix;
use crate::error::{Error, Result};

pub use dense::{
    dense_mean_trajectory, discretize, expm_dense, lyapunov_dense, matern32_state_space, realify, DenseKernel, DenseLti,
};
pub use diff::{inverse_softplus, softplus, BoundLti, LtiParams, LtiSignature};

/// Hyperparameters of a dynamic GP layer in complex-diagonal form.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexDiagonalLti {
    /// One pole per block.
    pub lambda: Vec<Complex64>,
    /// `num_blocks x n_u` input matrix.
    pub b: DMatrix<Complex64>,
    /// `num_blocks x n_l` diffusion matrix.
    pub l: DMatrix<Complex64>,
    /// Output weight per block.
    pub c: Vec<Complex64>,
    /// Real feedthrough, length `n_u`.
    pub d: Vec<f64>,
    /// Sampling time in seconds.
    pub delta: f64,
    /// Initial state mean per block.
    pub m0: Vec<Complex64>,
}

impl ComplexDiagonalLti {
    /// Builds a system with zero initial state after checking invariants.
    pub fn new(
        lambda: Vec<Complex64>,
        b: DMatrix<Complex64>,
        l: DMatrix<Complex64>,
        c: Vec<Complex64>,
        d: Vec<f64>,
        delta: f64,
    ) -> Result<Self> {
        let m0 = vec![Complex64::new(0.0, 0.0); lambda.len()];
        let sys = ComplexDiagonalLti { lambda, b, l, c, d, delta, m0 };
        sys.validate()?;
        Ok(sys)
    }

    pub fn num_blocks(&self) -> usize {
        self.lambda.len()
    }

    pub fn num_inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn num_noise(&self) -> usize {
        self.l.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let nb = self.num_blocks();
        if self.b.nrows() != nb || self.l.nrows() != nb || self.c.len() != nb || self.m0.len() != nb {
            return Err(Error::Config(format!(
                "inconsistent block counts: lambda {nb}, B {}, L {}, c {}, m0 {}",
                self.b.nrows(),
                self.l.nrows(),
                self.c.len(),
                self.m0.len()
            )));
        }
        if self.d.len() != self.b.ncols() {
            return Err(Error::Config(format!("D has {} entries for {} inputs", self.d.len(), self.b.ncols())));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Config(format!("sampling time must be positive, got {}", self.delta)));
        }
        self.check_stable()
    }

    fn check_stable(&self) -> Result<()> {
        match self.lambda.iter().position(|l| !(l.re < 0.0)) {
            Some(j) => Err(Error::Stability(format!("block {j} has pole {} with non-negative real part", self.lambda[j]))),
            None => Ok(()),
        }
    }
}

/// Steady-state covariance of one conjugate block,
/// `-[[LLᴴ/(λ+λ†), LLᵀ/(2λ)], [L†Lᴴ/(2λ†), L†Lᵀ/(λ+λ†)]]`.
pub fn steady_state_block(lambda: Complex64, l_row: &[Complex64]) -> Result<Matrix2<Complex64>> {
    if !(lambda.re < 0.0) {
        return Err(Error::Stability(format!("pole {lambda} is not in the open left half-plane")));
    }
    let llh: f64 = l_row.iter().map(|v| v.norm_sqr()).sum();
    let llt: Complex64 = l_row.iter().map(|v| v * v).sum();
    let two_re = 2.0 * lambda.re;
    let s11 = Complex64::new(-llh / two_re, 0.0);
    let s12 = -llt / (2.0 * lambda);
    Ok(Matrix2::new(s11, s12, s12.conj(), s11))
}

/// Lyapunov residual `A Σ + Σ Aᴴ + L_c L_cᴴ` of a block solution, as a
/// Frobenius norm.
pub fn steady_state_residual(lambda: Complex64, l_row: &[Complex64], sigma: &Matrix2<Complex64>) -> f64 {
    let a = Matrix2::new(lambda, Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0), lambda.conj());
    let mut lc = DMatrix::<Complex64>::zeros(2, l_row.len());
    for (k, v) in l_row.iter().enumerate() {
        lc[(0, k)] = *v;
        lc[(1, k)] = v.conj();
    }
    let q = &lc * lc.adjoint();
    let q2 = Matrix2::new(q[(0, 0)], q[(0, 1)], q[(1, 0)], q[(1, 1)]);
    (a * sigma + sigma * a.adjoint() + q2).norm()
}

fn block_terms(sys: &ComplexDiagonalLti) -> Result<Vec<(Complex64, Matrix2<Complex64>)>> {
    sys.check_stable()?;
    (0..sys.num_blocks())
        .map(|j| {
            let row: Vec<Complex64> = sys.l.row(j).iter().copied().collect();
            Ok((sys.lambda[j], steady_state_block(sys.lambda[j], &row)?))
        })
        .collect()
}

/// `S(t, t+τ)` summed over blocks, from the `t ≥ t'` branch
/// `C Ψ(τ) Σ∞ Cᴴ`, kept complex so callers can inspect the imaginary residue.
pub fn kernel_value_complex(sys: &ComplexDiagonalLti, tau: f64) -> Result<Complex64> {
    let terms = block_terms(sys)?;
    let mut acc = Complex64::new(0.0, 0.0);
    for (j, (lambda, sigma)) in terms.iter().enumerate() {
        let c = sys.c[j];
        let row = [c, c.conj()];
        let col = [c.conj(), c];
        let psi = [(lambda * tau).exp(), (lambda.conj() * tau).exp()];
        for (p, rp) in row.iter().enumerate() {
            for (q, cq) in col.iter().enumerate() {
                acc += rp * psi[p] * sigma[(p, q)] * cq;
            }
        }
    }
    Ok(acc)
}

/// `S(t+τ, t)` from the `t < t'` branch `C Σ∞ Ψ(τ)ᴴ Cᴴ`.
pub fn kernel_value_lower_branch(sys: &ComplexDiagonalLti, tau: f64) -> Result<Complex64> {
    let terms = block_terms(sys)?;
    let mut acc = Complex64::new(0.0, 0.0);
    for (j, (lambda, sigma)) in terms.iter().enumerate() {
        let c = sys.c[j];
        let row = [c, c.conj()];
        let col = [c.conj(), c];
        let psi_h = [(lambda.conj() * tau).exp(), (lambda * tau).exp()];
        for (p, rp) in row.iter().enumerate() {
            for (q, cq) in col.iter().enumerate() {
                acc += rp * sigma[(p, q)] * psi_h[q] * cq;
            }
        }
    }
    Ok(acc)
}

/// Stationary output covariance at lag `tau ≥ 0`.
pub fn kernel_value(sys: &ComplexDiagonalLti, tau: f64) -> Result<f64> {
    if tau < 0.0 {
        return Err(Error::Domain { op: "kernel_value", detail: format!("negative lag {tau}") });
    }
    Ok(kernel_value_complex(sys, tau)?.re)
}

/// Kernel values at lags `0, δ, …, (n-1)δ`.
pub fn kernel_lags(sys: &ComplexDiagonalLti, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|k| kernel_value(sys, k as f64 * sys.delta)).collect()
}

/// `n x n` covariance on the grid `0, δ, …, (n-1)δ`, assembled from the
/// `n` distinct lags.
pub fn kernel_matrix(sys: &ComplexDiagonalLti, n: usize) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::Contract("kernel_matrix needs n >= 1".into()));
    }
    let lags = kernel_lags(sys, n)?;
    Ok(Matrix::from_fn(n, n, |i, j| lags[i.abs_diff(j)]))
}

/// Zero-order-hold mean on the grid: row `k` of `inputs` holds `u(kδ)`.
/// Computed by the per-block recurrence
/// `x_k = e^{λδ} x_{k-1} + (e^{λδ}-1)/λ · B u_k`, `x_0 = m̃(0)`.
pub fn mean_trajectory(sys: &ComplexDiagonalLti, inputs: &Matrix) -> Result<Vec<f64>> {
    if inputs.cols() != sys.num_inputs() {
        return Err(Error::Shape {
            op: "mean_trajectory",
            detail: format!("{} input columns for a system with {} inputs", inputs.cols(), sys.num_inputs()),
        });
    }
    if let Some(j) = sys.lambda.iter().position(|l| l.norm() == 0.0) {
        return Err(Error::Singularity(format!("block {j} has a zero pole")));
    }
    let n = inputs.rows();
    let mut out = vec![0.0; n];
    for j in 0..sys.num_blocks() {
        let lambda = sys.lambda[j];
        let decay = (lambda * sys.delta).exp();
        let gain = (decay - 1.0) / lambda;
        let c = sys.c[j];
        let mut x = sys.m0[j];
        for k in 0..n {
            if k > 0 {
                let bu: Complex64 = (0..sys.num_inputs()).map(|i| sys.b[(j, i)] * inputs[(k, i)]).sum();
                x = decay * x + gain * bu;
            }
            out[k] += 2.0 * (c * x).re;
        }
    }
    for (k, o) in out.iter_mut().enumerate() {
        *o += sys.d.iter().zip(inputs.row_slice(k)).map(|(d, u)| d * u).sum::<f64>();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn one_block(lambda: Complex64, l: Complex64, cc: Complex64) -> ComplexDiagonalLti {
        ComplexDiagonalLti::new(
            vec![lambda],
            DMatrix::from_element(1, 1, c(1.0, 0.0)),
            DMatrix::from_element(1, 1, l),
            vec![cc],
            vec![0.0],
            0.1,
        )
        .unwrap()
    }

    #[test]
    fn unit_block_has_all_entries_one_half() {
        let s = steady_state_block(c(-1.0, 0.0), &[c(1.0, 0.0)]).unwrap();
        for v in s.iter() {
            assert!((v - c(0.5, 0.0)).norm() < 1e-15);
        }
        assert!(steady_state_residual(c(-1.0, 0.0), &[c(1.0, 0.0)], &s) < 1e-15);
    }

    #[test]
    fn no_diffusion_gives_zero_covariance() {
        let s = steady_state_block(c(-1.0, 0.0), &[c(0.0, 0.0)]).unwrap();
        assert!(s.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn oscillatory_block_solves_lyapunov() {
        let l = [c(1.0, 1.0)];
        let s = steady_state_block(c(-0.5, 2.0), &l).unwrap();
        assert!(steady_state_residual(c(-0.5, 2.0), &l, &s) < 1e-12);
        assert!((s - s.adjoint()).norm() < 1e-15);
        assert!(s[(0, 0)].re >= 0.0 && s[(0, 0)].im == 0.0);
    }

    #[test]
    fn unstable_pole_is_rejected() {
        assert!(matches!(steady_state_block(c(0.0, 1.0), &[c(1.0, 0.0)]), Err(Error::Stability(_))));
        let bad = ComplexDiagonalLti::new(
            vec![c(0.1, 0.0)],
            DMatrix::from_element(1, 1, c(1.0, 0.0)),
            DMatrix::from_element(1, 1, c(1.0, 0.0)),
            vec![c(1.0, 0.0)],
            vec![0.0],
            0.1,
        );
        assert!(matches!(bad, Err(Error::Stability(_))));
    }

    #[test]
    fn unit_system_variance_is_two() {
        let sys = one_block(c(-1.0, 0.0), c(1.0, 0.0), c(1.0, 0.0));
        assert!((kernel_value(&sys, 0.0).unwrap() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn zero_diffusion_kernel_vanishes() {
        let sys = one_block(c(-0.3, 4.0), c(0.0, 0.0), c(0.7, -0.2));
        for tau in [0.0, 0.5, 3.0] {
            assert_eq!(kernel_value(&sys, tau).unwrap(), 0.0);
        }
    }

    #[test]
    fn branches_agree_and_are_real() {
        let sys = one_block(c(-0.4, 1.3), c(0.6, -0.9), c(-0.2, 0.8));
        for tau in [0.0, 0.1, 0.37, 2.5] {
            let upper = kernel_value_complex(&sys, tau).unwrap();
            let lower = kernel_value_lower_branch(&sys, tau).unwrap();
            assert!(upper.im.abs() < 1e-10 && lower.im.abs() < 1e-10);
            assert!((upper.re - lower.re).abs() < 1e-10);
        }
    }

    #[test]
    fn kernel_matrix_is_toeplitz() {
        let sys = one_block(c(-0.4, 1.3), c(0.6, -0.9), c(-0.2, 0.8));
        let k = kernel_matrix(&sys, 5).unwrap();
        assert_eq!(k[(0, 0)], kernel_value(&sys, 0.0).unwrap());
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(k[(i, j)], k[(j, i)]);
                if i + 1 < 5 && j + 1 < 5 {
                    assert_eq!(k[(i, j)], k[(i + 1, j + 1)]);
                }
            }
        }
        assert_eq!(kernel_matrix(&sys, 1).unwrap().shape(), [1, 1]);
    }

    #[test]
    fn zero_input_gives_zero_mean() {
        let sys = one_block(c(-0.4, 1.3), c(0.6, -0.9), c(-0.2, 0.8));
        let m = mean_trajectory(&sys, &Matrix::zeros(20, 1)).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pure_feedthrough() {
        let mut sys = one_block(c(-1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0));
        sys.d = vec![1.0];
        let m = mean_trajectory(&sys, &Matrix::filled(10, 1, 1.0)).unwrap();
        assert!(m.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn zero_pole_is_singular() {
        let mut sys = one_block(c(-1.0, 0.0), c(1.0, 0.0), c(1.0, 0.0));
        sys.lambda[0] = c(0.0, 0.0);
        assert!(matches!(mean_trajectory(&sys, &Matrix::zeros(3, 1)), Err(Error::Singularity(_))));
    }
}
