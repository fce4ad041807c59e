//! Trainable parameters of a dynamic layer and their tape bindings.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::ComplexDiagonalLti;
use crate::diffnum::{Matrix, Tape, Var};
use crate::error::{Error, Result};

/// Which optional blocks a dynamic layer carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LtiSignature {
    pub num_blocks: usize,
    pub num_inputs: usize,
    pub num_noise: usize,
    /// Whether the input drives the state through `B`.
    pub has_b: bool,
    /// Whether the input reaches the output through `D`.
    pub has_d: bool,
}

/// Free reals behind a complex-diagonal system. The pole of block `j` is
/// `-softplus(a_j) + i b_j/δ`, so `b` is in radians per sample and Adam
/// steps on it are relative to the Nyquist band. The input matrix of the
/// system is `|λ_j| B_j`, which keeps the gain of every block near `|B_j|`
/// whatever its pole; `b_re`, `b_im` hold the unscaled `B_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LtiParams {
    pub signature: LtiSignature,
    pub delta: f64,
    /// `1 x nb`
    pub a: Matrix,
    /// `1 x nb`
    pub b: Matrix,
    /// `nb x n_u`
    pub b_re: Matrix,
    pub b_im: Matrix,
    /// `nb x n_l`
    pub l_re: Matrix,
    pub l_im: Matrix,
    /// `1 x nb`
    pub c_re: Matrix,
    pub c_im: Matrix,
    /// `1 x n_u`
    pub d: Matrix,
}

impl LtiParams {
    pub fn init(signature: LtiSignature, delta: f64, rng: &mut impl Rng) -> Result<Self> {
        if signature.num_blocks == 0 || signature.num_noise == 0 {
            return Err(Error::Config("a dynamic layer needs at least one block and one noise channel".into()));
        }
        if !(delta > 0.0) {
            return Err(Error::Config(format!("sampling time must be positive, got {delta}")));
        }
        let nb = signature.num_blocks;
        let nu = signature.num_inputs;
        let nl = signature.num_noise;
        let ua = Uniform::new(0.1, 2.0).map_err(|e| Error::Config(e.to_string()))?;
        let ub = Uniform::new(0.0, 0.5 * std::f64::consts::PI).map_err(|e| Error::Config(e.to_string()))?;
        let normal = Normal::new(0.0, (1.0 / nb as f64).sqrt()).map_err(|e| Error::Config(e.to_string()))?;
        let a = Matrix::from_fn(1, nb, |_, _| inverse_softplus(ua.sample(rng)));
        let b = Matrix::from_fn(1, nb, |_, _| ub.sample(rng));
        let mut gauss = |r, c| Matrix::from_fn(r, c, |_, _| normal.sample(rng));
        let b_re = gauss(nb, nu);
        let b_im = gauss(nb, nu);
        let l_re = gauss(nb, nl);
        let l_im = gauss(nb, nl);
        let c_re = gauss(1, nb);
        let c_im = gauss(1, nb);
        let mut p = LtiParams { signature, delta, a, b, b_re, b_im, l_re, l_im, c_re, c_im, d: Matrix::zeros(1, nu) };
        if !signature.has_b {
            p.b_re = Matrix::zeros(nb, nu);
            p.b_im = Matrix::zeros(nb, nu);
        }
        Ok(p)
    }

    /// Trainable tensors in a fixed order; `B` and `D` are omitted when the
    /// signature disables them.
    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        let mut v = vec![("a", &self.a), ("b", &self.b)];
        if self.signature.has_b {
            v.push(("B.re", &self.b_re));
            v.push(("B.im", &self.b_im));
        }
        v.extend([("L.re", &self.l_re), ("L.im", &self.l_im), ("c.re", &self.c_re), ("c.im", &self.c_im)]);
        if self.signature.has_d {
            v.push(("D", &self.d));
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let sig = self.signature;
        let mut v = vec![("a", &mut self.a), ("b", &mut self.b)];
        if sig.has_b {
            v.push(("B.re", &mut self.b_re));
            v.push(("B.im", &mut self.b_im));
        }
        v.extend([
            ("L.re", &mut self.l_re),
            ("L.im", &mut self.l_im),
            ("c.re", &mut self.c_re),
            ("c.im", &mut self.c_im),
        ]);
        if sig.has_d {
            v.push(("D", &mut self.d));
        }
        v
    }

    pub fn poles(&self) -> Vec<Complex64> {
        (0..self.signature.num_blocks)
            .map(|j| Complex64::new(-softplus(self.a[(0, j)]), self.b[(0, j)] / self.delta))
            .collect()
    }

    /// Concrete system for the current parameter values.
    pub fn to_system(&self) -> Result<ComplexDiagonalLti> {
        let nb = self.signature.num_blocks;
        let cm = |re: &Matrix, im: &Matrix| DMatrix::from_fn(re.rows(), re.cols(), |i, j| Complex64::new(re[(i, j)], im[(i, j)]));
        ComplexDiagonalLti::new(
            self.poles(),
            {
                let poles = self.poles();
                DMatrix::from_fn(nb, self.b_re.cols(), |i, j| Complex64::new(self.b_re[(i, j)], self.b_im[(i, j)]) * poles[i].norm())
            },
            cm(&self.l_re, &self.l_im),
            (0..nb).map(|j| Complex64::new(self.c_re[(0, j)], self.c_im[(0, j)])).collect(),
            self.d.as_slice().to_vec(),
            self.delta,
        )
    }

    /// Registers the trainable tensors as leaves (or constants when
    /// `trainable` is false).
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundLti<'t> {
        let put = |m: &Matrix| if trainable { tape.leaf(m.clone()) } else { tape.constant(m.clone()) };
        let fixed = |m: &Matrix| tape.constant(m.clone());
        let sig = self.signature;
        BoundLti {
            delta: self.delta,
            signature: sig,
            a: put(&self.a),
            b: put(&self.b),
            b_re: if sig.has_b { put(&self.b_re) } else { fixed(&self.b_re) },
            b_im: if sig.has_b { put(&self.b_im) } else { fixed(&self.b_im) },
            l_re: put(&self.l_re),
            l_im: put(&self.l_im),
            c_re: put(&self.c_re),
            c_im: put(&self.c_im),
            d: if sig.has_d { put(&self.d) } else { fixed(&self.d) },
        }
    }
}

/// Parameters of a dynamic layer living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundLti<'t> {
    pub delta: f64,
    pub signature: LtiSignature,
    pub a: Var<'t>,
    pub b: Var<'t>,
    pub b_re: Var<'t>,
    pub b_im: Var<'t>,
    pub l_re: Var<'t>,
    pub l_im: Var<'t>,
    pub c_re: Var<'t>,
    pub c_im: Var<'t>,
    pub d: Var<'t>,
}

impl<'t> BoundLti<'t> {
    /// Same order as [`LtiParams::tensors`].
    pub fn leaves(&self) -> Vec<Var<'t>> {
        let mut v = vec![self.a, self.b];
        if self.signature.has_b {
            v.extend([self.b_re, self.b_im]);
        }
        v.extend([self.l_re, self.l_im, self.c_re, self.c_im]);
        if self.signature.has_d {
            v.push(self.d);
        }
        v
    }

    fn tape(&self) -> &'t Tape {
        self.a.tape()
    }

    /// `(Re λ, Im λ)` as `1 x nb` rows.
    pub fn poles(&self) -> (Var<'t>, Var<'t>) {
        (-self.a.softplus(), self.b.scale(1.0 / self.delta))
    }

    /// Stationary kernel at each lag in the `K x 1` column `lags`.
    pub fn kernel_at_lags(&self, lags: &Matrix) -> Var<'t> {
        let tape = self.tape();
        let (lr, li) = self.poles();
        let row = |v: Var<'t>| v.sum_cols().t();
        let norm_l = row(self.l_re.square() + self.l_im.square());
        let q_re = row(self.l_re.square() - self.l_im.square());
        let q_im = row((self.l_re * self.l_im).scale(2.0));
        let s11 = norm_l / lr.scale(-2.0);
        let mag = (lr.square() + li.square()).scale(-2.0);
        let s12_re = (q_re * lr + q_im * li) / mag;
        let s12_im = (q_im * lr - q_re * li) / mag;
        let c_abs = self.c_re.square() + self.c_im.square();
        let c2_re = self.c_re.square() - self.c_im.square();
        let c2_im = (self.c_re * self.c_im).scale(2.0);
        let g_re = s11 * c_abs + s12_re * c2_re - s12_im * c2_im;
        let g_im = s12_re * c2_im + s12_im * c2_re;
        let tau = tape.constant(lags.clone());
        let (er, ei) = (tau * lr).complex_exp(tau * li);
        (er * g_re - ei * g_im).sum_cols().scale(2.0)
    }

    /// Mean output over a window whose first row is treated as time zero
    /// with zero initial state; `inputs` is `W x n_u`.
    pub fn mean_on_window(&self, inputs: Var<'t>) -> Var<'t> {
        let tape = self.tape();
        let w = inputs.rows();
        let feed = inputs.matmul(self.d.t());
        if !self.signature.has_b {
            return feed;
        }
        let (lr, li) = self.poles();
        let (er, ei) = lr.scale(self.delta).complex_exp(li.scale(self.delta));
        // (e^{λδ} - 1)/λ times |λ|
        let mag = lr.square() + li.square();
        let norm = mag.sqrt();
        let nr = er - tape.scalar(1.0);
        let gain_re = (nr * lr + ei * li) / norm;
        let gain_im = (ei * lr - nr * li) / norm;
        let mask = tape.constant(Matrix::from_fn(w, 1, |k, _| if k == 0 { 0.0 } else { 1.0 }));
        let dr = inputs.matmul(self.b_re.t()) * mask;
        let di = inputs.matmul(self.b_im.t()) * mask;
        let drive_re = gain_re * dr - gain_im * di;
        let drive_im = gain_re * di + gain_im * dr;
        let states = tape.cumulative_scan(er, ei, drive_re, drive_im);
        let nb = self.signature.num_blocks;
        let xr = states.cols_range(0, nb);
        let xi = states.cols_range(nb, 2 * nb);
        (xr * self.c_re - xi * self.c_im).sum_cols().scale(2.0) + feed
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}
