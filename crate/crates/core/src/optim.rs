//! First-order optimizer shared by MAP fitting and variational training.

use serde::{Deserialize, Serialize};

use crate::diffnum::Matrix;

/// Adam with bias-corrected moments, used for gradient ascent.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub step: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(step: f64) -> Self {
        Adam { step, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Moves every parameter along its gradient (ascent).
    pub fn ascend(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..g.len() {
                let gi = g.as_slice()[i];
                let mi = &mut m.as_mut_slice()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                let vi = &mut v.as_mut_slice()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = self.step * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                p.as_mut_slice()[i] += update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn climbs_a_concave_quadratic() {
        let mut x = Matrix::row(vec![3.0, -2.0]);
        let mut opt = Adam::new(0.1);
        for _ in 0..2000 {
            let g = x.map(|v| -2.0 * (v - 1.0));
            opt.ascend(&mut [&mut x], &[g]);
        }
        assert!(x.as_slice().iter().all(|v| (v - 1.0).abs() < 1e-3));
    }
}
