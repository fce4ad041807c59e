//! Dense real state-space machinery used as a reference for the
//! complex-diagonal fast path.

use nalgebra::DMatrix;

use super::ComplexDiagonalLti;
use crate::diffnum::Matrix;
use crate::error::{Error, Result};

/// A real LTI system `dx = (A x + B u) dt + L dω`, `y = C x + D u`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLti {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub l: DMatrix<f64>,
    /// `1 x n_x` output row.
    pub c: DMatrix<f64>,
    /// `1 x n_u` feedthrough row.
    pub d: DMatrix<f64>,
    pub m0: Vec<f64>,
}

impl DenseLti {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        let ok = self.a.ncols() == n
            && self.b.nrows() == n
            && self.l.nrows() == n
            && self.c.shape() == (1, n)
            && self.d.shape() == (1, self.b.ncols())
            && self.m0.len() == n;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape { op: "DenseLti", detail: format!("inconsistent dimensions for state size {n}") })
        }
    }
}

/// Real form of a complex-diagonal system, obtained with the unitary change
/// of basis `z_r = J z_c`, `J = 1/√2 [[1, 1], [i, -i]]` per block.
///
/// Each block is driven by its own Brownian motion, so `L_r` is block
/// diagonal with `num_blocks * n_l` columns and the output covariance is the
/// sum of the per-block kernels.
pub fn realify(sys: &ComplexDiagonalLti) -> DenseLti {
    let nb = sys.num_blocks();
    let n = 2 * nb;
    let s2 = std::f64::consts::SQRT_2;
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, sys.num_inputs());
    let nl = sys.num_noise();
    let mut l = DMatrix::zeros(n, nb * nl);
    let mut c = DMatrix::zeros(1, n);
    let mut m0 = vec![0.0; n];
    for j in 0..nb {
        let (p, q) = (2 * j, 2 * j + 1);
        let lam = sys.lambda[j];
        a[(p, p)] = lam.re;
        a[(p, q)] = lam.im;
        a[(q, p)] = -lam.im;
        a[(q, q)] = lam.re;
        for i in 0..sys.num_inputs() {
            b[(p, i)] = s2 * sys.b[(j, i)].re;
            b[(q, i)] = -s2 * sys.b[(j, i)].im;
        }
        for i in 0..nl {
            l[(p, j * nl + i)] = s2 * sys.l[(j, i)].re;
            l[(q, j * nl + i)] = -s2 * sys.l[(j, i)].im;
        }
        c[(0, p)] = s2 * sys.c[j].re;
        c[(0, q)] = s2 * sys.c[j].im;
        m0[p] = s2 * sys.m0[j].re;
        m0[q] = -s2 * sys.m0[j].im;
    }
    let d = DMatrix::from_row_slice(1, sys.d.len(), &sys.d);
    DenseLti { a, b, l, c, d, m0 }
}

/// State-space form of the Matérn-3/2 kernel with length scale `ell` and
/// amplitude `sigma2`, scaled so that `k(0) = √3 σ²`.
pub fn matern32_state_space(ell: f64, sigma2: f64) -> Result<DenseLti> {
    if !(ell > 0.0) || !(sigma2 > 0.0) {
        return Err(Error::Domain { op: "matern32_state_space", detail: format!("ell={ell}, sigma2={sigma2}") });
    }
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -3.0 / (ell * ell), -2.0 * 3f64.sqrt() / ell]);
    let l = DMatrix::from_row_slice(2, 1, &[0.0, (36.0 * sigma2 / ell.powi(3)).sqrt()]);
    Ok(DenseLti {
        a,
        b: DMatrix::zeros(2, 1),
        l,
        c: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        d: DMatrix::zeros(1, 1),
        m0: vec![0.0; 2],
    })
}

fn check_hurwitz(a: &DMatrix<f64>) -> Result<()> {
    let eig = a.complex_eigenvalues();
    match eig.iter().find(|e| !(e.re < 0.0)) {
        Some(e) => Err(Error::Stability(format!("state matrix has eigenvalue {e}"))),
        None => Ok(()),
    }
}

/// Solves `A Σ + Σ Aᵀ + Q = 0` through the Kronecker-vectorized system.
pub fn lyapunov_dense(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || q.shape() != (n, n) {
        return Err(Error::Shape { op: "lyapunov_dense", detail: format!("A {:?}, Q {:?}", a.shape(), q.shape()) });
    }
    check_hurwitz(a)?;
    let eye = DMatrix::<f64>::identity(n, n);
    let k = eye.kronecker(a) + a.kronecker(&eye);
    let rhs = DMatrix::from_column_slice(n * n, 1, (-q).as_slice());
    let sol = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singularity("Lyapunov operator is singular".into()))?;
    let s = DMatrix::from_column_slice(n, n, sol.as_slice());
    let s = (&s + s.transpose()) * 0.5;
    let resid = (a * &s + &s * a.transpose() + q).norm();
    if resid > 1e-8 * (1.0 + q.norm()) {
        return Err(Error::Numerical(format!("Lyapunov residual {resid:e}")));
    }
    Ok(s)
}

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// `exp(A t)` by scaling and squaring with a degree-13 Padé approximant.
pub fn expm_dense(a: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape { op: "expm_dense", detail: format!("{:?} is not square", a.shape()) });
    }
    let at = a * t;
    if !at.iter().all(|v| v.is_finite()) {
        return Err(Error::Domain { op: "expm_dense", detail: "non-finite entries".into() });
    }
    let norm1 = (0..n).map(|j| at.column(j).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let theta = 5.371920351148152;
    let squarings = if norm1 > theta { (norm1 / theta).log2().ceil() as i32 } else { 0 };
    let x = at / 2f64.powi(squarings);
    let b = &PADE13;
    let eye = DMatrix::<f64>::identity(n, n);
    let x2 = &x * &x;
    let x4 = &x2 * &x2;
    let x6 = &x4 * &x2;
    let inner_u = &x6 * (&x6 * b[13] + &x4 * b[11] + &x2 * b[9]) + &x6 * b[7] + &x4 * b[5] + &x2 * b[3] + &eye * b[1];
    let u = &x * inner_u;
    let v = &x6 * (&x6 * b[12] + &x4 * b[10] + &x2 * b[8]) + &x6 * b[6] + &x4 * b[4] + &x2 * b[2] + &eye * b[0];
    let mut r = (&v - &u)
        .lu()
        .solve(&(&v + &u))
        .ok_or_else(|| Error::Singularity("Padé denominator is singular".into()))?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    Ok(r)
}

/// Stationary output covariance of a dense system, with `Σ∞` solved once.
#[derive(Clone, Debug)]
pub struct DenseKernel {
    a: DMatrix<f64>,
    c: DMatrix<f64>,
    sigma: DMatrix<f64>,
}

impl DenseKernel {
    pub fn new(sys: &DenseLti) -> Result<Self> {
        sys.validate()?;
        let sigma = lyapunov_dense(&sys.a, &(&sys.l * sys.l.transpose()))?;
        Ok(DenseKernel { a: sys.a.clone(), c: sys.c.clone(), sigma })
    }

    pub fn stationary_covariance(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// `C e^{Aτ} Σ∞ Cᵀ` for `τ ≥ 0`, mirrored for negative lags.
    pub fn value(&self, tau: f64) -> Result<f64> {
        let psi = expm_dense(&self.a, tau.abs())?;
        Ok((&self.c * psi * &self.sigma * self.c.transpose())[(0, 0)])
    }

    /// Covariance between two arbitrary times, using both branches.
    pub fn cross(&self, t: f64, t_prime: f64) -> Result<f64> {
        if t >= t_prime {
            let psi = expm_dense(&self.a, t - t_prime)?;
            Ok((&self.c * psi * &self.sigma * self.c.transpose())[(0, 0)])
        } else {
            let psi = expm_dense(&self.a, t_prime - t)?;
            Ok((&self.c * &self.sigma * psi.transpose() * self.c.transpose())[(0, 0)])
        }
    }
}

/// Exact zero-order-hold discretization `(Ā, B̄)` with `B̄ = A⁻¹(Ā - I)B`.
pub fn discretize(sys: &DenseLti, delta: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = sys.state_dim();
    let abar = expm_dense(&sys.a, delta)?;
    let lu = sys.a.clone().lu();
    let rhs = (&abar - DMatrix::<f64>::identity(n, n)) * &sys.b;
    let bbar = lu.solve(&rhs).ok_or_else(|| Error::Singularity("state matrix is singular".into()))?;
    Ok((abar, bbar))
}

/// Mean output on the grid by exact ZOH simulation, `m_k = Ā m_{k-1} + B̄ u_k`.
pub fn dense_mean_trajectory(sys: &DenseLti, inputs: &Matrix, delta: f64) -> Result<Vec<f64>> {
    sys.validate()?;
    if inputs.cols() != sys.b.ncols() {
        return Err(Error::Shape { op: "dense_mean_trajectory", detail: format!("{} input columns", inputs.cols()) });
    }
    let (abar, bbar) = discretize(sys, delta)?;
    let mut m = DMatrix::from_column_slice(sys.state_dim(), 1, &sys.m0);
    let mut out = Vec::with_capacity(inputs.rows());
    for k in 0..inputs.rows() {
        let u = DMatrix::from_column_slice(inputs.cols(), 1, inputs.row_slice(k));
        if k > 0 {
            m = &abar * &m + &bbar * &u;
        }
        out.push((&sys.c * &m + &sys.d * &u)[(0, 0)]);
    }
    Ok(out)
}
