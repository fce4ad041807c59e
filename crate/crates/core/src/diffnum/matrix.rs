//! Dense row-major real matrices and the factorizations the tape relies on.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative jitter multipliers tried after a plain factorization fails.
/// Each entry is scaled by the mean of the diagonal.
pub const DEFAULT_JITTER_SCHEDULE: [f64; 4] = [1e-6, 1e-5, 1e-4, 1e-3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length does not match shape");
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn scalar(value: f64) -> Self {
        Matrix { rows: 1, cols: 1, data: vec![value] }
    }

    /// Column vector.
    pub fn column(values: Vec<f64>) -> Self {
        let n = values.len();
        Matrix { rows: n, cols: 1, data: values }
    }

    /// Row vector.
    pub fn row(values: Vec<f64>) -> Self {
        let n = values.len();
        Matrix { rows: 1, cols: n, data: values }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_slice_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn col_vec(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    /// Value of a 1x1 matrix.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar matrix");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!(self.shape(), other.shape());
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimensions");
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(m, n);
        if m == 0 || n == 0 || k == 0 {
            return out;
        }
        // SAFETY: pointers and strides describe the row-major buffers owned above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                k as isize,
                1,
                other.data.as_ptr(),
                n as isize,
                1,
                0.0,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lower triangle including the diagonal; the strict upper part is zeroed.
    pub fn lower_triangle(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| if j <= i { self[(i, j)] } else { 0.0 })
    }

    pub fn symmetrized(&self) -> Matrix {
        assert_eq!(self.rows, self.cols);
        Matrix::from_fn(self.rows, self.cols, |i, j| 0.5 * (self[(i, j)] + self[(j, i)]))
    }

    /// Cholesky factorization of the symmetric part, blocked so that most of
    /// the work goes through `dgemm`. On failure returns the index of the
    /// first non-positive pivot.
    pub fn cholesky(&self) -> std::result::Result<Matrix, usize> {
        assert_eq!(self.rows, self.cols, "cholesky of a non-square matrix");
        let n = self.rows;
        let mut l = self.symmetrized();
        for j0 in (0..n).step_by(BLOCK) {
            let j1 = (j0 + BLOCK).min(n);
            if j0 > 0 {
                // A[j0.., j0..j1] -= L[j0.., ..j0] L[j0..j1, ..j0]ᵀ
                // SAFETY: reads columns ..j0 and writes columns j0..j1 of the same buffer.
                unsafe {
                    let p = l.data.as_mut_ptr();
                    matrixmultiply::dgemm(n - j0, j0, j1 - j0, -1.0, p.add(j0 * n), n as isize, 1, p.add(j0 * n), 1, n as isize, 1.0, p.add(j0 * n + j0), n as isize, 1);
                }
            }
            for i in j0..n {
                for j in j0..j1.min(i + 1) {
                    let dot: f64 = (j0..j).map(|p| l.data[i * n + p] * l.data[j * n + p]).sum();
                    let v = l.data[i * n + j] - dot;
                    if i == j {
                        if !(v > 0.0) || !v.is_finite() {
                            return Err(i);
                        }
                        l.data[i * n + i] = v.sqrt();
                    } else {
                        l.data[i * n + j] = v / l.data[j * n + j];
                    }
                }
            }
        }
        Ok(l.lower_triangle())
    }

    /// Solves `L X = B` for lower-triangular `L`.
    pub fn solve_lower(&self, b: &Matrix) -> Matrix {
        let n = self.rows;
        assert_eq!(n, self.cols);
        assert_eq!(b.rows, n, "solve_lower right-hand side rows");
        let k = b.cols;
        let mut x = b.clone();
        if k == 0 {
            return x;
        }
        for i0 in (0..n).step_by(BLOCK) {
            let i1 = (i0 + BLOCK).min(n);
            if i0 > 0 {
                // X[i0..i1] -= L[i0..i1, ..i0] X[..i0]
                // SAFETY: reads rows ..i0 and writes rows i0..i1 of `x`.
                unsafe {
                    let xp = x.data.as_mut_ptr();
                    matrixmultiply::dgemm(i1 - i0, i0, k, -1.0, self.data.as_ptr().add(i0 * n), n as isize, 1, xp, k as isize, 1, 1.0, xp.add(i0 * k), k as isize, 1);
                }
            }
            for i in i0..i1 {
                let (done, rest) = x.data.split_at_mut(i * k);
                let xi = &mut rest[..k];
                for j in i0..i {
                    let lij = self.data[i * n + j];
                    if lij != 0.0 {
                        for (a, &b) in xi.iter_mut().zip(&done[j * k..(j + 1) * k]) {
                            *a -= lij * b;
                        }
                    }
                }
                let d = self.data[i * n + i];
                for a in xi.iter_mut() {
                    *a /= d;
                }
            }
        }
        x
    }

    /// Solves `Lᵀ X = B` for lower-triangular `L`.
    pub fn solve_lower_transpose(&self, b: &Matrix) -> Matrix {
        let n = self.rows;
        assert_eq!(n, self.cols);
        assert_eq!(b.rows, n, "solve_lower_transpose right-hand side rows");
        let k = b.cols;
        let mut x = b.clone();
        if k == 0 || n == 0 {
            return x;
        }
        let mut i1 = n;
        while i1 > 0 {
            let i0 = i1.saturating_sub(BLOCK);
            if i1 < n {
                // X[i0..i1] -= L[i1.., i0..i1]ᵀ X[i1..]
                // SAFETY: reads rows i1.. and writes rows i0..i1 of `x`.
                unsafe {
                    let xp = x.data.as_mut_ptr();
                    matrixmultiply::dgemm(i1 - i0, n - i1, k, -1.0, self.data.as_ptr().add(i1 * n + i0), 1, n as isize, xp.add(i1 * k), k as isize, 1, 1.0, xp.add(i0 * k), k as isize, 1);
                }
            }
            for i in (i0..i1).rev() {
                let (head, tail) = x.data.split_at_mut((i + 1) * k);
                let xi = &mut head[i * k..];
                for j in (i + 1)..i1 {
                    let lji = self.data[j * n + i];
                    if lji != 0.0 {
                        for (a, &b) in xi.iter_mut().zip(&tail[(j - i - 1) * k..(j - i) * k]) {
                            *a -= lji * b;
                        }
                    }
                }
                let d = self.data[i * n + i];
                for a in xi.iter_mut() {
                    *a /= d;
                }
            }
            i1 = i0;
        }
        x
    }

    pub fn to_nalgebra(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_nalgebra(m: &nalgebra::DMatrix<f64>) -> Matrix {
        Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Result of [`cholesky_jittered`]: the lower factor and the absolute jitter
/// that was added to the diagonal.
#[derive(Clone, Debug)]
pub struct JitteredCholesky {
    pub factor: Matrix,
    pub jitter: f64,
}

/// Factorizes `M + εI`, trying `ε = 0` first and then each relative entry of
/// `schedule` (scaled by the mean diagonal) in increasing order.
/// Panel width of the blocked factorization and solves.
const BLOCK: usize = 64;

pub fn cholesky_jittered(m: &Matrix, schedule: &[f64]) -> Result<JitteredCholesky> {
    if m.rows() != m.cols() {
        return Err(Error::Shape {
            op: "cholesky_jittered",
            detail: format!("expected a square matrix, got {}x{}", m.rows(), m.cols()),
        });
    }
    let mut smallest_pivot = match m.cholesky() {
        Ok(factor) => return Ok(JitteredCholesky { factor, jitter: 0.0 }),
        Err(p) => p,
    };
    let n = m.rows();
    let mean_diag = if n == 0 { 1.0 } else { m.trace().abs() / n as f64 };
    let base = if mean_diag > 0.0 && mean_diag.is_finite() { mean_diag } else { 1.0 };
    let mut sorted: Vec<f64> = schedule.to_vec();
    sorted.sort_by(f64::total_cmp);
    for rel in sorted {
        let eps = rel * base;
        let mut shifted = m.clone();
        for i in 0..n {
            shifted[(i, i)] += eps;
        }
        match shifted.cholesky() {
            Ok(factor) => return Ok(JitteredCholesky { factor, jitter: eps }),
            Err(p) => smallest_pivot = smallest_pivot.min(p),
        }
    }
    Err(Error::NotPositiveDefinite { pivot: smallest_pivot })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_factors_to_itself() {
        let f = cholesky_jittered(&Matrix::identity(3), &DEFAULT_JITTER_SCHEDULE).unwrap();
        assert_eq!(f.factor, Matrix::identity(3));
        assert_eq!(f.jitter, 0.0);
    }

    #[test]
    fn rank_one_takes_first_jitter() {
        let m = Matrix::filled(2, 2, 1.0);
        let f = cholesky_jittered(&m, &DEFAULT_JITTER_SCHEDULE).unwrap();
        assert_eq!(f.jitter, 1e-6);
        let recon = f.factor.matmul(&f.factor.transpose());
        let mut expected = m.clone();
        expected[(0, 0)] += 1e-6;
        expected[(1, 1)] += 1e-6;
        assert!(recon.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn negative_eigenvalue_is_rejected() {
        // eigenvalues 3 and -1
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        match cholesky_jittered(&m, &[1e-4, 1e-2]) {
            Err(Error::NotPositiveDefinite { pivot }) => assert_eq!(pivot, 1),
            other => panic!("expected not-positive-definite, got {other:?}"),
        }
    }

    #[test]
    fn non_square_is_a_shape_error() {
        assert!(matches!(
            cholesky_jittered(&Matrix::zeros(2, 3), &DEFAULT_JITTER_SCHEDULE),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn triangular_solves_invert_the_factor() {
        let a = Matrix::from_rows(&[
            vec![4.0, 2.0, 0.4],
            vec![2.0, 3.0, 0.5],
            vec![0.4, 0.5, 2.0],
        ]);
        let l = a.cholesky().unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, -1.0], vec![3.0, 0.5]]);
        let x = l.solve_lower(&b);
        assert!(l.matmul(&x).max_abs_diff(&b) < 1e-12);
        let y = l.solve_lower_transpose(&b);
        assert!(l.transpose().matmul(&y).max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn matmul_matches_naive_product() {
        let a = Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.5 - 1.0);
        let b = Matrix::from_fn(4, 2, |i, j| (i as f64 - j as f64).sin());
        let c = a.matmul(&b);
        for i in 0..3 {
            for j in 0..2 {
                let naive: f64 = (0..4).map(|k| a[(i, k)] * b[(k, j)]).sum();
                assert!((c[(i, j)] - naive).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn blocked_factor_and_solves_span_several_panels() {
        let n = 150;
        let g = Matrix::from_fn(n, n, |i, j| ((i * 7 + j * 13) % 17) as f64 / 17.0 - 0.5);
        let gg = g.matmul(&g.transpose());
        let a = Matrix::from_fn(n, n, |i, j| gg[(i, j)] + if i == j { 1.0 } else { 0.0 });
        let l = a.cholesky().unwrap();
        assert!(l.matmul(&l.transpose()).max_abs_diff(&a) < 1e-10);
        let b = Matrix::from_fn(n, 3, |i, j| (i as f64 * 0.1 + j as f64).cos());
        assert!(l.matmul(&l.solve_lower(&b)).max_abs_diff(&b) < 1e-10);
        assert!(l.transpose().matmul(&l.solve_lower_transpose(&b)).max_abs_diff(&b) < 1e-10);
        let mut bad = a.clone();
        bad[(100, 100)] = -1.0;
        assert_eq!(bad.cholesky(), Err(100));
    }
}
