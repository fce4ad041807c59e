//! ELBO, stochastic variational training and Monte-Carlo prediction.

use std::time::Instant;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::conditional::{factor_inducing, prepare_rows, trailing, cache_prep, kl_whitened, layer_marginals, prepare_unit, restore_prep, sample_on_tape, CachedPrep, UnitPrep};
use super::prior::horseshoe_log_prior_on_tape;
use super::{Architecture, BoundArchitecture, LayerKind, BoundUnitParams, SeriesData, UnitParams};
use crate::diffnum::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::optim::Adam;

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// Likelihood rows `start..end` of one minibatch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

impl Window {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub windows_per_iter: usize,
    pub window_size: usize,
    pub mc_samples: usize,
    pub step: f64,
    pub seed: u64,
    /// Horseshoe scale on the diffusion matrices of dynamic layers.
    pub horseshoe_scale: Option<f64>,
    /// Rows of input history run through the layers before each window.
    /// `Some(0)` starts every window from zero state; `None` replays the
    /// whole history from the first grid point.
    pub burn_in: Option<usize>,
    /// When false only the variational states are optimized.
    pub train_hyperparameters: bool,
    /// Iterations during which the observation noise is held at its initial
    /// value, so the noise cannot absorb the signal before the posterior
    /// has moved.
    pub noise_warmup: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            windows_per_iter: 4,
            window_size: 256,
            mc_samples: 8,
            step: 1e-2,
            seed: 0,
            horseshoe_scale: Some(0.1),
            burn_in: Some(0),
            train_hyperparameters: true,
            noise_warmup: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// ELBO plus log prior at each iteration.
    pub objective: Vec<f64>,
    /// Mean wall-clock seconds per minibatch window.
    pub seconds_per_batch: f64,
}

fn forward_rows(w: &Window, burn_in: Option<usize>) -> usize {
    match burn_in {
        None => 0,
        Some(b) => w.start.saturating_sub(b),
    }
}

fn input_rows(data: &Matrix, start: usize, end: usize) -> Matrix {
    Matrix::from_fn(end - start, data.cols(), |i, j| data[(start + i, j)])
}

/// Runs every layer but the last with sampling; returns the last layer's
/// marginals.
fn propagate<'t>(
    tape: &'t Tape,
    arch: &BoundArchitecture<'t>,
    preps: &[Vec<UnitPrep<'t>>],
    first: (Var<'t>, Var<'t>),
    u: Var<'t>,
    rng: &mut impl Rng,
) -> Result<(Var<'t>, Var<'t>)> {
    let (mut mean, mut var) = first;
    for li in 1..preps.len() {
        let h = sample_on_tape(tape, mean, var, rng)?;
        let input = if arch.layers[li].skip_input { tape.concat(&[h, trailing(u, h.rows())], 1) } else { h };
        (mean, var) = layer_marginals(tape, &preps[li], input);
    }
    Ok((mean, var))
}

fn elbo_on_tape<'t>(
    tape: &'t Tape,
    arch: &BoundArchitecture<'t>,
    data: &SeriesData,
    windows: &[Window],
    mc_samples: usize,
    burn_in: Option<usize>,
    data_scale: Option<f64>,
    rng: &mut impl Rng,
) -> Result<Var<'t>> {
    if mc_samples == 0 {
        return Err(Error::Config("mc_samples must be at least 1".into()));
    }
    let n = data.n_train();
    let batch: usize = windows.iter().map(Window::len).sum();
    if batch == 0 || windows.iter().any(|w| w.end > n || w.start >= w.end) {
        return Err(Error::Contract(format!("windows must be non-empty and inside the {n} training rows")));
    }
    // Layers from the last dynamic one on only need the window rows; the
    // dynamic mean recursion still runs over the whole forward range.
    let pointwise_from = arch.layers.iter().rposition(|l| l.kind == LayerKind::Dynamic).unwrap_or(0);
    let any_dynamic = arch.layers.iter().any(|l| l.kind == LayerKind::Dynamic);
    let factors = arch
        .layers
        .iter()
        .map(|l| l.units.iter().map(factor_inducing).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let mut data_term = tape.scalar(0.0);
    for w in windows {
        let f0 = if any_dynamic { forward_rows(w, burn_in) } else { w.start };
        let u = tape.constant(input_rows(&data.inputs, f0, w.end));
        let preps: Vec<Vec<UnitPrep<'t>>> = arch
            .layers
            .iter()
            .zip(&factors)
            .enumerate()
            .map(|(li, (l, f))| {
                let rows = if li >= pointwise_from { w.start..w.end } else { f0..w.end };
                l.units.iter().zip(f).map(|(unit, fu)| prepare_rows(unit, fu, rows.clone())).collect()
            })
            .collect();
        let first = layer_marginals(tape, &preps[0], u);
        let y = tape.constant(Matrix::column(data.y[w.start..w.end].to_vec()));
        let len = w.len();
        let half_log = (arch.noise.ln() + tape.scalar(LOG_2PI)).scale(-0.5 * len as f64);
        for _ in 0..mc_samples {
            let mut srng = ChaCha8Rng::seed_from_u64(rng.random());
            let (mean, var) = propagate(tape, arch, &preps, first, u, &mut srng)?;
            let mu = trailing(mean, len);
            let v = trailing(var, len);
            let sq = ((y - mu).square() + v).sum() / arch.noise.scale(2.0);
            data_term = data_term + (half_log - sq).scale(1.0 / mc_samples as f64);
        }
    }
    let mut kl = tape.scalar(0.0);
    for layer in &arch.layers {
        for unit in &layer.units {
            kl = kl + kl_whitened(&unit.q);
        }
    }
    Ok(data_term.scale(data_scale.unwrap_or(n as f64 / batch as f64)) - kl)
}

/// Seeded ELBO estimate on the given windows.
pub fn elbo(arch: &Architecture, data: &SeriesData, windows: &[Window], mc_samples: usize, burn_in: Option<usize>, seed: u64) -> Result<f64> {
    let tape = Tape::new();
    let bound = arch.bind(&tape, false, false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(elbo_on_tape(&tape, &bound, data, windows, mc_samples, burn_in, None, &mut rng)?.item())
}

/// Seeded ELBO and its gradient with respect to every tensor of
/// [`Architecture::tensors_mut`] (with hyperparameters), in that order.
pub fn elbo_with_gradients(
    arch: &Architecture,
    data: &SeriesData,
    windows: &[Window],
    mc_samples: usize,
    burn_in: Option<usize>,
    seed: u64,
) -> Result<(f64, Vec<Matrix>)> {
    let tape = Tape::new();
    let bound = arch.bind(&tape, true, true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obj = elbo_on_tape(&tape, &bound, data, windows, mc_samples, burn_in, None, &mut rng)?;
    let grads = tape.backward(obj)?;
    Ok((obj.item(), bound.leaves.iter().map(|&v| grads.wrt(v)).collect()))
}

fn log_prior<'t>(tape: &'t Tape, arch: &BoundArchitecture<'t>, scale: Option<f64>) -> Var<'t> {
    let mut total = tape.scalar(0.0);
    if let Some(s) = scale {
        for layer in &arch.layers {
            for unit in &layer.units {
                if let BoundUnitParams::Dynamic { lti, .. } = &unit.params {
                    total = total + horseshoe_log_prior_on_tape(lti.l_re, s) + horseshoe_log_prior_on_tape(lti.l_im, s);
                }
            }
        }
    }
    total
}

fn warn_on_short_windows(arch: &Architecture, cfg: &TrainConfig) {
    if cfg.burn_in.is_none() {
        return;
    }
    let slowest = arch
        .layers
        .iter()
        .flat_map(|l| &l.units)
        .filter_map(|u| match &u.params {
            UnitParams::Dynamic { lti, .. } => lti.poles().iter().map(|p| -1.0 / p.re).reduce(f64::max),
            UnitParams::Static { .. } => None,
        })
        .fold(0.0, f64::max);
    let span = (cfg.window_size + cfg.burn_in.unwrap_or(0)) as f64 * arch.delta;
    if span < 5.0 * slowest {
        warn!("window spans {span:.3}s but the slowest dynamic mode has time constant {slowest:.3}s");
    }
}

/// A length-`size` window with a uniform start in `1 - size..n`, clipped to
/// the data, so every row is equally likely to be drawn.
fn clipped_window(n: usize, size: usize, rng: &mut impl Rng) -> Window {
    let s = rng.random_range(0..n + size - 1) as isize - (size as isize - 1);
    Window { start: s.max(0) as usize, end: ((s + size as isize) as usize).min(n) }
}

/// Maximizes ELBO plus log prior with Adam over random contiguous windows.
pub fn train_svi(arch: &Architecture, data: &SeriesData, cfg: &TrainConfig) -> Result<(Architecture, TrainTrace)> {
    let n = data.n_train();
    if cfg.window_size == 0 || cfg.window_size > n {
        return Err(Error::Config(format!("window size {} must be in 1..={n}", cfg.window_size)));
    }
    if cfg.windows_per_iter == 0 {
        return Err(Error::Config("windows_per_iter must be at least 1".into()));
    }
    arch.validate()?;
    warn_on_short_windows(arch, cfg);
    let hyper = cfg.train_hyperparameters;
    let prior_scale = if hyper { cfg.horseshoe_scale } else { None };
    let mut current = arch.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.step);
    let mut trace = TrainTrace::default();
    // Each row lands in a clipped window with probability W / (n + W - 1).
    // A window as long as the series is the full batch.
    let full = cfg.window_size == n;
    let data_scale = if full { 1.0 / cfg.windows_per_iter as f64 } else { (n + cfg.window_size - 1) as f64 / (cfg.window_size * cfg.windows_per_iter) as f64 };
    let clock = Instant::now();
    for it in 0..cfg.iterations {
        let windows: Vec<Window> =
            (0..cfg.windows_per_iter).map(|_| if full { Window { start: 0, end: n } } else { clipped_window(n, cfg.window_size, &mut rng) }).collect();
        let tape = Tape::new();
        let bound = current.bind(&tape, true, hyper);
        let fail = |detail: String| Error::Training { iteration: it, detail };
        let obj = elbo_on_tape(&tape, &bound, data, &windows, cfg.mc_samples, cfg.burn_in, Some(data_scale), &mut rng).map_err(|e| fail(e.to_string()))?
            + log_prior(&tape, &bound, prior_scale);
        let value = obj.item();
        let grads = tape.backward(obj).map_err(|e| fail(e.to_string()))?;
        let g: Vec<Matrix> = bound.leaves.iter().map(|&v| grads.wrt(v)).collect();
        drop(bound);
        let mut params = current.tensors_mut(hyper);
        if !value.is_finite() || g.iter().any(|m| !m.is_finite()) {
            let bad: Vec<&str> = params.iter().zip(&g).filter(|(_, m)| !m.is_finite()).map(|((n, _), _)| n.as_str()).collect();
            return Err(fail(format!("objective {value}; non-finite gradients in {bad:?}")));
        }
        let mut g = g;
        if it < cfg.noise_warmup {
            for ((name, _), gi) in params.iter().zip(g.iter_mut()) {
                if name == "noise" {
                    *gi = Matrix::zeros(gi.rows(), gi.cols());
                }
            }
        }
        let mut refs: Vec<&mut Matrix> = params.iter_mut().map(|(_, m)| &mut **m).collect();
        opt.ascend(&mut refs, &g);
        trace.objective.push(value);
    }
    let batches = (cfg.iterations * cfg.windows_per_iter).max(1);
    trace.seconds_per_batch = clock.elapsed().as_secs_f64() / batches as f64;
    Ok((current, trace))
}

/// Output draws at the requested grid indices (`num_samples x horizon`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveSamples {
    pub samples: Matrix,
    pub index: Vec<usize>,
}

impl PredictiveSamples {
    pub fn mean(&self) -> Vec<f64> {
        let s = self.samples.rows() as f64;
        let mut out = vec![0.0; self.samples.cols()];
        for i in 0..self.samples.rows() {
            for (o, v) in out.iter_mut().zip(self.samples.row_slice(i)) {
                *o += v / s;
            }
        }
        out
    }

    /// Empirical quantile per column, linearly interpolated.
    pub fn quantile(&self, q: f64) -> Vec<f64> {
        (0..self.samples.cols())
            .map(|j| {
                let mut col = self.samples.col_vec(j);
                col.sort_by(f64::total_cmp);
                let pos = q.clamp(0.0, 1.0) * (col.len() - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = pos.ceil() as usize;
                col[lo] + (pos - lo as f64) * (col[hi] - col[lo])
            })
            .collect()
    }
}

/// Monte-Carlo predictive draws. Every layer is sampled; observation noise
/// is added to the final draw when `observation_noise` is set. The forward
/// pass starts from zero state at grid index 0.
pub fn predict(
    arch: &Architecture,
    inputs: &Matrix,
    horizon: &[usize],
    num_samples: usize,
    observation_noise: bool,
    seed: u64,
) -> Result<PredictiveSamples> {
    if num_samples == 0 {
        return Err(Error::Config("num_samples must be at least 1".into()));
    }
    let end = horizon.iter().max().map(|m| m + 1).ok_or_else(|| Error::Contract("empty prediction horizon".into()))?;
    if end > inputs.rows() {
        return Err(Error::Contract(format!("horizon index {} beyond {} input rows", end - 1, inputs.rows())));
    }
    arch.validate()?;
    let u_all = input_rows(inputs, 0, end);
    let (cached, first) = {
        let tape = Tape::new();
        let bound = arch.bind(&tape, false, false);
        let preps = bound
            .layers
            .iter()
            .map(|l| l.units.iter().map(|unit| prepare_unit(unit, 0..end)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let (m, v) = layer_marginals(&tape, &preps[0], tape.constant(u_all.clone()));
        let cached: Vec<Vec<CachedPrep>> = preps.iter().map(|l| l.iter().map(cache_prep).collect()).collect();
        (cached, (m.to_matrix(), v.to_matrix()))
    };
    let noise_sd = arch.noise_variance().sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Matrix::zeros(num_samples, horizon.len());
    for s in 0..num_samples {
        let mut srng = ChaCha8Rng::seed_from_u64(rng.random());
        let tape = Tape::new();
        let bound = arch.bind(&tape, false, false);
        let preps: Vec<Vec<UnitPrep<'_>>> = bound
            .layers
            .iter()
            .zip(&cached)
            .map(|(l, c)| l.units.iter().zip(c).map(|(unit, cp)| restore_prep(&tape, unit, cp)).collect())
            .collect();
        let u = tape.constant(u_all.clone());
        let first_vars = (tape.constant(first.0.clone()), tape.constant(first.1.clone()));
        let (mean, var) = propagate(&tape, &bound, &preps, first_vars, u, &mut srng)?;
        let f = sample_on_tape(&tape, mean, var, &mut srng)?.to_matrix();
        for (k, &idx) in horizon.iter().enumerate() {
            let eps: f64 = if observation_noise { srng.sample(StandardNormal) } else { 0.0 };
            samples[(s, k)] = f[(idx, 0)] + noise_sd * eps;
        }
    }
    Ok(PredictiveSamples { samples, index: horizon.to_vec() })
}
