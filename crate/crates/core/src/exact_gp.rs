//! Exact GP regression with either a dynamic (LTI) or a static (Matérn)
//! prior, MAP hyperparameter fitting and the Gaussian posterior.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::deep_gp::horseshoe_log_prior_on_tape;
use crate::diffnum::{cholesky_jittered, cholesky_on_tape, Matrix, Tape, Var, DEFAULT_JITTER_SCHEDULE};
use crate::error::{Error, Result};
use crate::lti_gp::diff::{inverse_softplus, softplus};
use crate::lti_gp::{BoundLti, LtiParams};
use crate::optim::Adam;
use crate::static_gp::{BoundMean, BoundStatic, MeanParams, StaticParams};

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// Where a set of observations sits.
#[derive(Clone, Debug, PartialEq)]
pub enum Design {
    /// Static covariates, one row per point.
    Points(Matrix),
    /// Indices into a uniform time grid. `inputs` holds `u(kδ)` in row `k`
    /// from `k = 0` and must cover every index.
    Grid { inputs: Rc<Matrix>, index: Vec<usize> },
}

impl Design {
    pub fn len(&self) -> usize {
        match self {
            Design::Points(x) => x.rows(),
            Design::Grid { index, .. } => index.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Contiguous grid `0..n` over the given inputs.
    pub fn full_grid(inputs: Matrix) -> Self {
        let n = inputs.rows();
        Design::Grid { inputs: Rc::new(inputs), index: (0..n).collect() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GpData {
    pub design: Design,
    pub y: Vec<f64>,
}

impl GpData {
    pub fn new(design: Design, y: Vec<f64>) -> Result<Self> {
        if design.len() != y.len() {
            return Err(Error::Shape { op: "GpData", detail: format!("{} points and {} targets", design.len(), y.len()) });
        }
        if design.is_empty() {
            return Err(Error::Contract("a GP dataset needs at least one point".into()));
        }
        if let Design::Grid { inputs, index } = &design {
            if let Some(&k) = index.iter().find(|&&k| k >= inputs.rows()) {
                return Err(Error::Contract(format!("grid index {k} beyond {} input rows", inputs.rows())));
            }
        }
        Ok(GpData { design, y })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GpKernel {
    Dynamic(LtiParams),
    Static { kernel: StaticParams, mean: MeanParams },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpModel {
    pub kernel: GpKernel,
    /// `1 x 1`, softplus gives `ς²`.
    pub raw_noise: Matrix,
}

impl GpModel {
    pub fn new(kernel: GpKernel, noise_variance: f64) -> Result<Self> {
        if !(noise_variance > 0.0) {
            return Err(Error::Domain { op: "GpModel", detail: format!("noise variance {noise_variance} must be positive") });
        }
        Ok(GpModel { kernel, raw_noise: Matrix::scalar(inverse_softplus(noise_variance)) })
    }

    pub fn noise_variance(&self) -> f64 {
        softplus(self.raw_noise.item())
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        let mut v = match &self.kernel {
            GpKernel::Dynamic(p) => p.tensors(),
            GpKernel::Static { kernel, mean } => {
                let mut v = kernel.tensors();
                v.extend(mean.tensors());
                v
            }
        };
        v.push(("noise", &self.raw_noise));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut v = match &mut self.kernel {
            GpKernel::Dynamic(p) => p.tensors_mut(),
            GpKernel::Static { kernel, mean } => {
                let mut v = kernel.tensors_mut();
                v.extend(mean.tensors_mut());
                v
            }
        };
        v.push(("noise", &mut self.raw_noise));
        v
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundGp<'t> {
        let kernel = match &self.kernel {
            GpKernel::Dynamic(p) => BoundKernel::Dynamic(p.bind(tape, trainable)),
            GpKernel::Static { kernel, mean } => BoundKernel::Static(kernel.bind(tape, trainable), mean.bind(tape, trainable)),
        };
        let raw_noise = if trainable { tape.leaf(self.raw_noise.clone()) } else { tape.constant(self.raw_noise.clone()) };
        BoundGp { kernel, raw_noise, noise: raw_noise.softplus() }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum BoundKernel<'t> {
    Dynamic(BoundLti<'t>),
    Static(BoundStatic<'t>, BoundMean<'t>),
}

#[derive(Clone, Copy, Debug)]
pub struct BoundGp<'t> {
    pub kernel: BoundKernel<'t>,
    pub raw_noise: Var<'t>,
    pub noise: Var<'t>,
}

impl<'t> BoundGp<'t> {
    /// Same order as [`GpModel::tensors`].
    pub fn leaves(&self) -> Vec<Var<'t>> {
        let mut v = match &self.kernel {
            BoundKernel::Dynamic(p) => p.leaves(),
            BoundKernel::Static(k, m) => {
                let mut v = k.leaves();
                v.extend(m.leaves());
                v
            }
        };
        v.push(self.raw_noise);
        v
    }
}

/// Distinct lags between two index sets and, for each pair, the position of
/// its lag in that list (row-major over `a x b`).
pub fn lag_table(a: &[usize], b: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let max_lag = a.iter().flat_map(|&i| b.iter().map(move |&j| i.abs_diff(j))).max().unwrap_or(0);
    let mut slot = vec![usize::MAX; max_lag + 1];
    for &i in a {
        for &j in b {
            slot[i.abs_diff(j)] = 0;
        }
    }
    let mut lags = Vec::new();
    for (lag, s) in slot.iter_mut().enumerate() {
        if *s == 0 {
            *s = lags.len();
            lags.push(lag);
        }
    }
    let index = a.iter().flat_map(|&i| b.iter().map(|&j| slot[i.abs_diff(j)]).collect::<Vec<_>>()).collect();
    (lags, index)
}

/// Dynamic kernel between two sets of grid indices, built from the distinct
/// lags only.
pub fn dynamic_cross<'t>(lti: &BoundLti<'t>, a: &[usize], b: &[usize]) -> Var<'t> {
    let (lags, index) = lag_table(a, b);
    let taus = Matrix::column(lags.iter().map(|&k| k as f64 * lti.delta).collect());
    lti.kernel_at_lags(&taus).gather(Rc::new(index), (a.len(), b.len()))
}

pub fn prior_mean<'t>(kernel: &BoundKernel<'t>, tape: &'t Tape, design: &Design) -> Result<Var<'t>> {
    match (kernel, design) {
        (BoundKernel::Dynamic(lti), Design::Grid { inputs, index }) => {
            let end = index.iter().max().map_or(0, |m| m + 1);
            let window = Matrix::from_fn(end, inputs.cols(), |i, j| inputs[(i, j)]);
            let m = lti.mean_on_window(tape.constant(window));
            Ok(m.gather(Rc::new(index.clone()), (index.len(), 1)))
        }
        (BoundKernel::Static(_, mean), Design::Points(x)) => Ok(mean.eval(tape.constant(x.clone()))),
        _ => Err(Error::Contract("dynamic kernels need grid designs and static kernels need point designs".into())),
    }
}

pub fn prior_cross<'t>(kernel: &BoundKernel<'t>, tape: &'t Tape, a: &Design, b: &Design) -> Result<Var<'t>> {
    match (kernel, a, b) {
        (BoundKernel::Dynamic(lti), Design::Grid { index: ia, .. }, Design::Grid { index: ib, .. }) => Ok(dynamic_cross(lti, ia, ib)),
        (BoundKernel::Static(k, _), Design::Points(xa), Design::Points(xb)) => {
            Ok(k.cross(tape.constant(xa.clone()), tape.constant(xb.clone())))
        }
        _ => Err(Error::Contract("dynamic kernels need grid designs and static kernels need point designs".into())),
    }
}

/// `log N(y; m, K + ς²I)` recorded on the tape.
pub fn log_marginal_likelihood_on_tape<'t>(gp: &BoundGp<'t>, tape: &'t Tape, data: &GpData) -> Result<Var<'t>> {
    let n = data.y.len();
    let m = prior_mean(&gp.kernel, tape, &data.design)?;
    let k = prior_cross(&gp.kernel, tape, &data.design, &data.design)?;
    let k = k + tape.constant(Matrix::identity(n)) * gp.noise;
    let (l, _) = cholesky_on_tape(k, &DEFAULT_JITTER_SCHEDULE)?;
    let r = tape.constant(Matrix::column(data.y.clone())) - m;
    let alpha = l.solve_lower(r, false);
    let quad = alpha.square().sum().scale(-0.5);
    Ok(quad - l.diag().ln().sum() - tape.scalar(0.5 * n as f64 * LOG_2PI))
}

pub fn log_marginal_likelihood(model: &GpModel, data: &GpData) -> Result<f64> {
    let tape = Tape::new();
    let gp = model.bind(&tape, false);
    Ok(log_marginal_likelihood_on_tape(&gp, &tape, data)?.item())
}

/// Gradient of the log marginal likelihood with respect to every tensor of
/// [`GpModel::tensors`], in that order.
pub fn log_marginal_likelihood_grad(model: &GpModel, data: &GpData) -> Result<(f64, Vec<Matrix>)> {
    let tape = Tape::new();
    let gp = model.bind(&tape, true);
    let obj = log_marginal_likelihood_on_tape(&gp, &tape, data)?;
    let grads = tape.backward(obj)?;
    Ok((obj.item(), gp.leaves().iter().map(|&v| grads.wrt(v)).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorGaussian {
    pub mean: Vec<f64>,
    pub covariance: Matrix,
}

impl PosteriorGaussian {
    pub fn variance(&self) -> Vec<f64> {
        self.covariance.diagonal()
    }
}

/// Posterior of the latent function at `test`, with the prior mean folded in:
/// `m(x*) + K*ᵀ(K + ς²I)⁻¹(y − m(X))`.
pub fn posterior_predict(model: &GpModel, train: &GpData, test: &Design) -> Result<PosteriorGaussian> {
    let tape = Tape::new();
    let gp = model.bind(&tape, false);
    let n = train.y.len();
    let m_train = prior_mean(&gp.kernel, &tape, &train.design)?.to_matrix();
    let m_test = prior_mean(&gp.kernel, &tape, test)?.to_matrix();
    let mut k = prior_cross(&gp.kernel, &tape, &train.design, &train.design)?.to_matrix();
    let ks = prior_cross(&gp.kernel, &tape, &train.design, test)?.to_matrix();
    let kss = prior_cross(&gp.kernel, &tape, test, test)?.to_matrix();
    let noise = model.noise_variance();
    for i in 0..n {
        k[(i, i)] += noise;
    }
    let l = cholesky_jittered(&k, &DEFAULT_JITTER_SCHEDULE)?.factor;
    let r = Matrix::column(train.y.iter().zip(m_train.as_slice()).map(|(y, m)| y - m).collect());
    let alpha = l.solve_lower_transpose(&l.solve_lower(&r));
    let mean = ks.transpose().matmul(&alpha);
    let v = l.solve_lower(&ks);
    let cov = kss.zip_map(&v.transpose().matmul(&v), |a, b| a - b).symmetrized();
    Ok(PosteriorGaussian { mean: mean.as_slice().iter().zip(m_test.as_slice()).map(|(a, b)| a + b).collect(), covariance: cov })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapConfig {
    pub iterations: usize,
    pub step: f64,
    /// Horseshoe scale for the diffusion matrix of dynamic kernels; `None`
    /// keeps every prior uniform.
    pub horseshoe_scale: Option<f64>,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig { iterations: 2000, step: 1e-2, horseshoe_scale: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MapTrace {
    /// Objective at each iterate, starting with the initial point.
    pub objective: Vec<f64>,
    /// Running maximum of `objective`.
    pub best: Vec<f64>,
}

fn log_prior_on_tape<'t>(gp: &BoundGp<'t>, tape: &'t Tape, cfg: &MapConfig) -> Var<'t> {
    match (&gp.kernel, cfg.horseshoe_scale) {
        (BoundKernel::Dynamic(lti), Some(scale)) => {
            horseshoe_log_prior_on_tape(lti.l_re, scale) + horseshoe_log_prior_on_tape(lti.l_im, scale)
        }
        _ => tape.scalar(0.0),
    }
}

/// Log marginal likelihood plus log prior.
pub fn map_objective(model: &GpModel, data: &GpData, cfg: &MapConfig) -> Result<f64> {
    let tape = Tape::new();
    let gp = model.bind(&tape, false);
    Ok((log_marginal_likelihood_on_tape(&gp, &tape, data)? + log_prior_on_tape(&gp, &tape, cfg)).item())
}

fn objective_and_grads(model: &GpModel, data: &GpData, cfg: &MapConfig) -> Result<(f64, Vec<Matrix>)> {
    let tape = Tape::new();
    let gp = model.bind(&tape, true);
    let obj = log_marginal_likelihood_on_tape(&gp, &tape, data)? + log_prior_on_tape(&gp, &tape, cfg);
    let grads = tape.backward(obj)?;
    Ok((obj.item(), gp.leaves().iter().map(|&v| grads.wrt(v)).collect()))
}

fn diagnose(model: &GpModel, grads: Option<&[Matrix]>) -> String {
    let names = model.tensors();
    if let Some((name, _)) = names.iter().find(|(_, m)| !m.is_finite()) {
        return name.to_string();
    }
    if let Some(g) = grads {
        if let Some(k) = g.iter().position(|m| !m.is_finite()) {
            return names[k].0.to_string();
        }
    }
    "objective".into()
}

/// Adam ascent on log-ML plus log-prior. Returns the best iterate seen.
pub fn fit_map(model: &GpModel, data: &GpData, cfg: &MapConfig) -> Result<(GpModel, MapTrace)> {
    let mut current = model.clone();
    let (obj0, grads0) = match objective_and_grads(&current, data, cfg) {
        Ok(v) => v,
        Err(Error::NotPositiveDefinite { .. }) => return Err(Error::Init { param: diagnose(&current, None) }),
        Err(e) => return Err(e),
    };
    if !obj0.is_finite() || grads0.iter().any(|g| !g.is_finite()) {
        return Err(Error::Init { param: diagnose(&current, Some(&grads0)) });
    }
    let mut trace = MapTrace { objective: vec![obj0], best: vec![obj0] };
    let mut best = (obj0, current.clone());
    let mut opt = Adam::new(cfg.step);
    let mut grads = grads0;
    for it in 1..=cfg.iterations {
        {
            let mut params = current.tensors_mut();
            let mut refs: Vec<&mut Matrix> = params.iter_mut().map(|(_, m)| &mut **m).collect();
            opt.ascend(&mut refs, &grads);
        }
        let (obj, g) = objective_and_grads(&current, data, cfg)
            .map_err(|e| Error::Training { iteration: it, detail: e.to_string() })?;
        if !obj.is_finite() || g.iter().any(|m| !m.is_finite()) {
            return Err(Error::Training { iteration: it, detail: format!("non-finite objective or gradient in `{}`", diagnose(&current, Some(&g))) });
        }
        if obj > best.0 {
            best = (obj, current.clone());
        }
        trace.objective.push(obj);
        trace.best.push(best.0);
        grads = g;
    }
    Ok((best.1, trace))
}
