//! Exact-discretization simulation of stochastic LTI systems and synthetic
//! Wiener datasets.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::diffnum::Matrix;
use crate::error::{Error, Result};
use crate::lti_gp::{discretize, lyapunov_dense, ComplexDiagonalLti, DenseLti};

pub fn positive_part(x: f64) -> f64 {
    x.max(0.0)
}

/// How the state is drawn at grid index 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    /// The system's `m0`.
    Mean,
    /// `m0 + N(0, Σ∞)`.
    Stationary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `n x n_x`
    pub states: Matrix,
    pub outputs: Vec<f64>,
}

/// Symmetric square root with negative eigenvalues clipped.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.symmetric_part());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d
}

fn gaussian(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Simulates `z_k = Ā z_{k-1} + B̄ u_k + w_k` and `y_k = C z_k + D u_k`
/// with `w_k ~ N(0, Σ∞ − ĀΣ∞Āᵀ)` for `1 ≤ k < noise_steps` and `w_k = 0`
/// afterwards.
fn run(sys: &DenseLti, inputs: &Matrix, delta: f64, noise_steps: usize, initial: InitialState, rng: &mut impl Rng) -> Result<Trajectory> {
    sys.validate()?;
    if inputs.cols() != sys.b.ncols() {
        return Err(Error::Shape { op: "simulate_lti", detail: format!("{} input columns for {} system inputs", inputs.cols(), sys.b.ncols()) });
    }
    if !(delta > 0.0) {
        return Err(Error::Config(format!("sampling time must be positive, got {delta}")));
    }
    let nx = sys.state_dim();
    let (abar, bbar) = discretize(sys, delta)?;
    let needs_sigma = noise_steps > 1 || initial == InitialState::Stationary;
    let sigma = if needs_sigma { Some(lyapunov_dense(&sys.a, &(&sys.l * sys.l.transpose()))?) } else { None };
    let noise_root = match &sigma {
        Some(s) if noise_steps > 1 => Some(psd_sqrt(&(s - &abar * s * abar.transpose()))),
        _ => None,
    };
    let mut z = DVector::from_column_slice(&sys.m0);
    if let (InitialState::Stationary, Some(s)) = (initial, &sigma) {
        z += psd_sqrt(s) * gaussian(rng, nx);
    }
    let n = inputs.rows();
    let mut states = Matrix::zeros(n, nx);
    let mut outputs = Vec::with_capacity(n);
    for k in 0..n {
        let u = DVector::from_column_slice(inputs.row_slice(k));
        if k > 0 {
            z = &abar * &z + &bbar * &u;
            if let Some(root) = noise_root.as_ref().filter(|_| k < noise_steps) {
                z += root * gaussian(rng, nx);
            }
        }
        states.as_mut_slice()[k * nx..(k + 1) * nx].copy_from_slice(z.as_slice());
        outputs.push((&sys.c * &z)[(0, 0)] + (&sys.d * &u)[(0, 0)]);
    }
    Ok(Trajectory { states, outputs })
}

/// Exact ZOH simulation on the grid `kδ`. Row `k` of `inputs` is `u(kδ)`.
/// With process noise the system must be stable.
pub fn simulate_lti(
    sys: &DenseLti,
    inputs: &Matrix,
    delta: f64,
    with_process_noise: bool,
    initial: InitialState,
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise_steps = if with_process_noise { inputs.rows() } else { 0 };
    run(sys, inputs, delta, noise_steps, initial, &mut rng)
}

/// The `−Λ − vvᵀ` system: `Λ`, `v` uniform on `[0, 1]`; `B`, `C` standard
/// normal; `L` normal with variance 0.1.
pub fn random_rank_one_system(state_dim: usize, num_inputs: usize, rng: &mut impl Rng) -> Result<DenseLti> {
    let unit = Uniform::new(0.0, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let diffusion = Normal::new(0.0, 0.1f64.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let lambda: Vec<f64> = (0..state_dim).map(|_| unit.sample(rng)).collect();
    let v = DVector::from_fn(state_dim, |_, _| unit.sample(rng));
    let a = -DMatrix::from_diagonal(&DVector::from_vec(lambda)) - &v * v.transpose();
    let b = DMatrix::from_fn(state_dim, num_inputs, |_, _| rng.sample(StandardNormal));
    let c = DMatrix::from_fn(1, state_dim, |_, _| rng.sample(StandardNormal));
    let l = DMatrix::from_fn(state_dim, 1, |_, _| diffusion.sample(rng));
    Ok(DenseLti { a, b, l, c, d: DMatrix::zeros(1, num_inputs), m0: vec![0.0; state_dim] })
}

/// Random complex-diagonal system with poles `−U(0.2, 2) + iU(0, 2π)`,
/// standard complex normal `B`, `c` and diffusion of variance 0.1.
pub fn random_complex_system(num_blocks: usize, num_inputs: usize, delta: f64, rng: &mut impl Rng) -> Result<ComplexDiagonalLti> {
    let mut cn = |scale: f64| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(re, im) * (scale / 2f64.sqrt())
    };
    let b = DMatrix::from_fn(num_blocks, num_inputs, |_, _| cn(1.0));
    let l = DMatrix::from_fn(num_blocks, 1, |_, _| cn(0.1f64.sqrt()));
    let c = (0..num_blocks).map(|_| cn(1.0)).collect();
    let lambda = (0..num_blocks).map(|_| Complex64::new(-rng.random_range(0.2..2.0), rng.random_range(0.0..2.0 * PI))).collect();
    ComplexDiagonalLti::new(lambda, b, l, c, vec![0.0; num_inputs], delta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    PositivePart,
    Quadratic,
    Identity,
}

impl Nonlinearity {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::PositivePart => positive_part(x),
            Nonlinearity::Quadratic => x * x,
            Nonlinearity::Identity => x,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrueSystem {
    RankOne { state_dim: usize },
    ComplexBlocks { num_blocks: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WienerConfig {
    pub system: TrueSystem,
    pub nonlinearity: Nonlinearity,
    pub delta: f64,
    pub t_end: f64,
    /// Training covers `t < t_split`.
    pub t_split: f64,
    /// Measurement-noise std as a fraction of the training output std.
    pub noise_std_fraction: f64,
    pub seed: u64,
}

impl Default for WienerConfig {
    fn default() -> Self {
        WienerConfig {
            system: TrueSystem::RankOne { state_dim: 5 },
            nonlinearity: Nonlinearity::PositivePart,
            delta: 0.01,
            t_end: 25.0,
            t_split: 15.0,
            noise_std_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedDataset {
    pub times: Vec<f64>,
    /// `n x 2`
    pub inputs: Matrix,
    /// Measured outputs: noisy before `split`, noise-free from `split` on.
    pub y: Vec<f64>,
    /// Outputs before measurement noise, over the whole grid.
    pub y_clean: Vec<f64>,
    pub split: usize,
    pub noise_std: f64,
    pub delta: f64,
}

impl GeneratedDataset {
    pub fn y_train(&self) -> &[f64] {
        &self.y[..self.split]
    }

    pub fn y_test(&self) -> &[f64] {
        &self.y[self.split..]
    }

    /// Writes `time,u1,u2,y` with a header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["time".to_string()];
        header.extend((1..=self.inputs.cols()).map(|j| format!("u{j}")));
        header.push("y".into());
        w.write_record(&header)?;
        for k in 0..self.y.len() {
            let mut row = vec![format!("{}", self.times[k])];
            row.extend(self.inputs.row_slice(k).iter().map(|v| format!("{v}")));
            row.push(format!("{}", self.y[k]));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Two-input system driven by `[sin(3πt), sin(5πt)]`, simulated with process
/// noise before `t_split` and without it afterwards (the state carries
/// over). Measurement noise is added to the training part only.
pub fn generate_wiener_dataset(cfg: &WienerConfig) -> Result<GeneratedDataset> {
    if !(cfg.delta > 0.0) || !(cfg.t_end > cfg.t_split) || !(cfg.t_split > 0.0) || !(cfg.noise_std_fraction >= 0.0) {
        return Err(Error::Config(format!("invalid dataset configuration {cfg:?}")));
    }
    let n = (cfg.t_end / cfg.delta).round() as usize;
    let split = (cfg.t_split / cfg.delta).round() as usize;
    let times: Vec<f64> = (0..n).map(|k| k as f64 * cfg.delta).collect();
    let inputs = Matrix::from_fn(n, 2, |k, j| (if j == 0 { 3.0 } else { 5.0 } * PI * times[k]).sin());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sys = match cfg.system {
        TrueSystem::RankOne { state_dim } => random_rank_one_system(state_dim, 2, &mut rng)?,
        TrueSystem::ComplexBlocks { num_blocks } => crate::lti_gp::realify(&random_complex_system(num_blocks, 2, cfg.delta, &mut rng)?),
    };
    let traj = run(&sys, &inputs, cfg.delta, split, InitialState::Mean, &mut rng)?;
    let y_clean: Vec<f64> = traj.outputs.iter().map(|&v| cfg.nonlinearity.apply(v)).collect();
    let head = &y_clean[..split];
    let mean = head.iter().sum::<f64>() / split as f64;
    let sd = (head.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / split as f64).sqrt();
    let noise_std = cfg.noise_std_fraction * sd;
    let y = y_clean
        .iter()
        .enumerate()
        .map(|(k, &v)| if k < split { v + noise_std * rng.sample::<f64, _>(StandardNormal) } else { v })
        .collect();
    Ok(GeneratedDataset { times, inputs, y, y_clean, split, noise_std, delta: cfg.delta })
}
