//! Reverse-mode gradients of the training objectives against central
//! differences on random models.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deep_gp::{elbo, elbo_with_gradients, Architecture, LayerSpec, MeanKind, SeriesData, Window};
use crate::diffnum::{relative_error, Matrix};
use crate::error::Result;
use crate::exact_gp::{log_marginal_likelihood, log_marginal_likelihood_grad, Design, GpData, GpKernel, GpModel};
use crate::lti_gp::{LtiParams, LtiSignature};
use crate::static_gp::{MeanFunction, MeanParams, StaticParams, Matern32Params};

const STEP: f64 = 1e-5;

/// Worst relative error per configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub log_ml: Vec<f64>,
    pub elbo: Vec<f64>,
}

impl GradientReport {
    pub fn worst_log_ml(&self) -> f64 {
        self.log_ml.iter().copied().fold(0.0, f64::max)
    }

    pub fn worst_elbo(&self) -> f64 {
        self.elbo.iter().copied().fold(0.0, f64::max)
    }
}

fn random_gp(rng: &mut ChaCha8Rng) -> Result<(GpModel, GpData)> {
    let noise = rng.random_range(0.05..0.5);
    if rng.random_bool(0.5) {
        let d = rng.random_range(1..=3);
        let n = rng.random_range(12..=25);
        let x = Matrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
        let y = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        let params = Matern32Params { lengthscales: (0..d).map(|_| rng.random_range(0.4..2.0)).collect(), scale: rng.random_range(0.5..2.0) };
        let mean = match rng.random_range(0..3) {
            0 => MeanFunction::Zero,
            1 => MeanFunction::Constant { value: rng.random_range(-0.5..0.5) },
            _ => MeanFunction::Linear { weights: (0..d).map(|_| rng.random_range(-0.5..0.5)).collect(), bias: rng.random_range(-0.5..0.5) },
        };
        let kernel = GpKernel::Static { kernel: StaticParams::new(&params)?, mean: MeanParams::from_function(&mean) };
        Ok((GpModel::new(kernel, noise)?, GpData::new(Design::Points(x), y)?))
    } else {
        let nu = rng.random_range(1..=2);
        let sig = LtiSignature {
            num_blocks: rng.random_range(1..=3),
            num_inputs: nu,
            num_noise: rng.random_range(1..=2),
            has_b: true,
            has_d: rng.random_bool(0.5),
        };
        let delta = rng.random_range(0.05..0.2);
        let mut lti = LtiParams::init(sig, delta, rng)?;
        if sig.has_d {
            lti.d = Matrix::from_fn(1, nu, |_, _| rng.random_range(-0.5..0.5));
        }
        let grid = 50;
        let u = Matrix::from_fn(grid, nu, |k, j| (k as f64 * delta * (1.0 + j as f64)).sin());
        let index: Vec<usize> = (0..grid).filter(|_| rng.random_bool(0.4)).collect();
        let y = index.iter().map(|_| rng.random_range(-1.5..1.5)).collect();
        Ok((GpModel::new(GpKernel::Dynamic(lti), noise)?, GpData::new(Design::Grid { inputs: Rc::new(u), index }, y)?))
    }
}

fn check_log_ml(model: &GpModel, data: &GpData) -> Result<f64> {
    let (_, grads) = log_marginal_likelihood_grad(model, data)?;
    let mut worst: f64 = 0.0;
    for (p, g) in grads.iter().enumerate() {
        for k in 0..g.len() {
            let eval = |shift: f64| {
                let mut m = model.clone();
                m.tensors_mut()[p].1.as_mut_slice()[k] += shift;
                log_marginal_likelihood(&m, data)
            };
            let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            worst = worst.max(relative_error(g.as_slice()[k], numeric));
        }
    }
    Ok(worst)
}

fn random_architecture(rng: &mut ChaCha8Rng) -> Result<(Architecture, SeriesData)> {
    let n = 40;
    let nu = rng.random_range(1..=2);
    let delta = 0.1;
    let u = Matrix::from_fn(n, nu, |k, j| (k as f64 * delta * (2.0 + j as f64)).sin() + rng.random_range(-0.1..0.1));
    let y = (0..n).map(|k| u[(k, 0)].max(0.0) + rng.random_range(-0.1..0.1)).collect();
    let data = SeriesData::new(u, y, delta)?;
    let dynamic = |width: usize, in_width: usize, rng: &mut ChaCha8Rng| LayerSpec::Dynamic {
        n_s: 2 * rng.random_range(1..=2),
        n_b: in_width,
        n_l: rng.random_range(1..=2),
        n_d: if rng.random_bool(0.5) { in_width } else { 0 },
        width,
        inducing: rng.random_range(4..=8),
        skip_input: false,
    };
    let fixed = |inducing: usize, mean| LayerSpec::Static { width: 1, inducing, mean: Some(mean), skip_input: false };
    let specs = match rng.random_range(0..3) {
        0 => vec![dynamic(1, nu, rng)],
        1 => vec![dynamic(1, nu, rng), fixed(rng.random_range(3..=6), MeanKind::Constant)],
        _ => {
            let w = rng.random_range(1..=2);
            vec![dynamic(w, nu, rng), LayerSpec::Static { width: 1, inducing: 5, mean: Some(MeanKind::Linear), skip_input: true }]
        }
    };
    let mut arch = Architecture::initialize(&specs, &data, rng.random())?;
    for (_, t) in arch.tensors_mut(false) {
        for v in t.as_mut_slice() {
            *v += 0.2 * rng.random_range(-1.0..1.0);
        }
    }
    Ok((arch, data))
}

fn check_elbo(arch: &Architecture, data: &SeriesData, rng: &mut ChaCha8Rng) -> Result<f64> {
    let windows = [Window { start: 4, end: 20 }, Window { start: 22, end: 40 }];
    let burn_in = Some(rng.random_range(0..5));
    let seed: u64 = rng.random();
    let mc = 2;
    let (_, grads) = elbo_with_gradients(arch, data, &windows, mc, burn_in, seed)?;
    let mut worst: f64 = 0.0;
    for (p, g) in grads.iter().enumerate() {
        for k in 0..g.len() {
            let eval = |shift: f64| {
                let mut a = arch.clone();
                a.tensors_mut(true)[p].1.as_mut_slice()[k] += shift;
                elbo(&a, data, &windows, mc, burn_in, seed)
            };
            let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            worst = worst.max(relative_error(g.as_slice()[k], numeric));
        }
    }
    Ok(worst)
}

/// Checks log-ML and seeded-ELBO gradients on `num_configs` random models
/// each. ELBO differences reuse the same seed, so both sides see the same
/// noise draws.
pub fn gradient_suite(num_configs: usize, seed: u64) -> Result<GradientReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradientReport::default();
    for _ in 0..num_configs {
        let (model, data) = random_gp(&mut rng)?;
        report.log_ml.push(check_log_ml(&model, &data)?);
        let (arch, series) = random_architecture(&mut rng)?;
        report.elbo.push(check_elbo(&arch, &series, &mut rng)?);
    }
    Ok(report)
}
