//! Deep dynamic GPs: stacks of dynamic (LTI) and static (Matérn) GP layers
//! trained by doubly stochastic variational inference.

mod conditional;
mod inducing;
mod prior;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnum::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::lti_gp::diff::{inverse_softplus, softplus};
use crate::lti_gp::{BoundLti, LtiParams, LtiSignature};
use crate::static_gp::{BoundMean, BoundStatic, MeanFunction, MeanParams, StaticParams};

pub use conditional::{kl_term, layer_conditional, sample_layer, GaussianMarginals};
pub use inducing::{draw_inducing_times, inducing_weights, select_inducing_times};
pub use prior::{horseshoe_log_prior, horseshoe_log_prior_on_tape};
pub use train::{elbo, elbo_with_gradients, predict, train_svi, PredictiveSamples, TrainConfig, TrainTrace, Window};

/// Whitened Gaussian `q(v) = N(μ, SSᵀ)` over `v = L_ZZ⁻¹(u − m(Z))`.
/// The lower triangle of `sqrt_raw` holds `S`, with a softplus on the
/// diagonal to keep it positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    /// `m x 1`
    pub mean: Matrix,
    /// `m x m`
    pub sqrt_raw: Matrix,
}

impl VariationalState {
    /// `μ = 0` and `S = scale·I`.
    pub fn new(m: usize, scale: f64) -> Self {
        let d = inverse_softplus(scale);
        VariationalState { mean: Matrix::zeros(m, 1), sqrt_raw: Matrix::from_fn(m, m, |i, j| if i == j { d } else { 0.0 }) }
    }

    /// Sets `q` from an explicit whitened mean and lower Cholesky factor.
    pub fn from_cholesky(mean: &[f64], chol: &Matrix) -> Result<Self> {
        let m = mean.len();
        if chol.shape() != [m, m] {
            return Err(Error::Shape { op: "VariationalState", detail: format!("{}x{} factor for {m} means", chol.rows(), chol.cols()) });
        }
        if (0..m).any(|i| !(chol[(i, i)] > 0.0)) {
            return Err(Error::Domain { op: "VariationalState", detail: "factor diagonal must be positive".into() });
        }
        let sqrt_raw = Matrix::from_fn(m, m, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => chol[(i, j)],
            std::cmp::Ordering::Equal => inverse_softplus(chol[(i, i)]),
            std::cmp::Ordering::Less => 0.0,
        });
        Ok(VariationalState { mean: Matrix::column(mean.to_vec()), sqrt_raw })
    }

    pub fn len(&self) -> usize {
        self.mean.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn chol(&self) -> Matrix {
        let m = self.len();
        Matrix::from_fn(m, m, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => self.sqrt_raw[(i, j)],
            std::cmp::Ordering::Equal => softplus(self.sqrt_raw[(i, i)]),
            std::cmp::Ordering::Less => 0.0,
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundVariational<'t> {
        let put = |m: &Matrix| if trainable { tape.leaf(m.clone()) } else { tape.constant(m.clone()) };
        let mean = put(&self.mean);
        let raw = put(&self.sqrt_raw);
        let m = self.len();
        let strict = tape.constant(Matrix::from_fn(m, m, |i, j| if i > j { 1.0 } else { 0.0 }));
        let eye = tape.constant(Matrix::identity(m));
        BoundVariational { mean, raw, chol: raw * strict + raw.softplus() * eye }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundVariational<'t> {
    pub mean: Var<'t>,
    pub raw: Var<'t>,
    pub chol: Var<'t>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dynamic,
    Static,
}

/// One GP inside a layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UnitParams {
    /// Inducing points are fixed grid indices.
    Dynamic { lti: LtiParams, inducing: Vec<usize> },
    /// Inducing inputs (`m x d`) are trainable.
    Static { kernel: StaticParams, mean: MeanParams, inducing: Matrix },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpUnit {
    pub params: UnitParams,
    pub variational: VariationalState,
}

impl GpUnit {
    pub fn num_inducing(&self) -> usize {
        self.variational.len()
    }

    fn tensors_mut(&mut self, hyper: bool) -> Vec<(String, &mut Matrix)> {
        let mut v: Vec<(String, &mut Matrix)> = Vec::new();
        if hyper {
            match &mut self.params {
                UnitParams::Dynamic { lti, .. } => v.extend(lti.tensors_mut().into_iter().map(|(n, m)| (n.to_string(), m))),
                UnitParams::Static { kernel, mean, inducing } => {
                    v.extend(kernel.tensors_mut().into_iter().map(|(n, m)| (n.to_string(), m)));
                    v.extend(mean.tensors_mut().into_iter().map(|(n, m)| (n.to_string(), m)));
                    v.push(("inducing".into(), inducing));
                }
            }
        }
        v.push(("q.mean".into(), &mut self.variational.mean));
        v.push(("q.sqrt".into(), &mut self.variational.sqrt_raw));
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub kind: LayerKind,
    pub units: Vec<GpUnit>,
    /// Whether the original inputs are appended to this layer's input.
    pub skip_input: bool,
}

impl Layer {
    pub fn width(&self) -> usize {
        self.units.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub layers: Vec<Layer>,
    /// `1 x 1`, softplus gives `ς²`.
    pub raw_noise: Matrix,
    pub num_inputs: usize,
    pub delta: f64,
}

/// Textual description of a layer used to build an [`Architecture`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dynamic {
        /// State dimension, even.
        n_s: usize,
        /// Columns of `B`: 0 disables it, otherwise the layer input width.
        n_b: usize,
        /// Columns of `L`.
        n_l: usize,
        /// Columns of `D`: 0 disables it, otherwise the layer input width.
        n_d: usize,
        #[serde(default = "one")]
        width: usize,
        inducing: usize,
        #[serde(default)]
        skip_input: bool,
    },
    Static {
        #[serde(default = "one")]
        width: usize,
        inducing: usize,
        /// Defaults to linear for an input layer and constant otherwise.
        #[serde(default)]
        mean: Option<MeanKind>,
        #[serde(default)]
        skip_input: bool,
    },
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanKind {
    Zero,
    Constant,
    Linear,
}

impl LayerSpec {
    pub fn width(&self) -> usize {
        match self {
            LayerSpec::Dynamic { width, .. } | LayerSpec::Static { width, .. } => *width,
        }
    }

    pub fn skip_input(&self) -> bool {
        match self {
            LayerSpec::Dynamic { skip_input, .. } | LayerSpec::Static { skip_input, .. } => *skip_input,
        }
    }
}

/// Training data on a uniform grid. `inputs` may extend past the training
/// targets (test inputs are needed for prediction).
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesData {
    pub inputs: Matrix,
    pub y: Vec<f64>,
    pub delta: f64,
}

impl SeriesData {
    pub fn new(inputs: Matrix, y: Vec<f64>, delta: f64) -> Result<Self> {
        if y.is_empty() || y.len() > inputs.rows() {
            return Err(Error::Shape { op: "SeriesData", detail: format!("{} targets for {} input rows", y.len(), inputs.rows()) });
        }
        if !(delta > 0.0) {
            return Err(Error::Config(format!("sampling time must be positive, got {delta}")));
        }
        Ok(SeriesData { inputs, y, delta })
    }

    pub fn n_train(&self) -> usize {
        self.y.len()
    }
}

impl Architecture {
    /// Builds and initializes an architecture for `data`. Dynamic inducing
    /// times are drawn from the training grid; static inducing inputs are
    /// placed on the prior-mean outputs of the layers below.
    pub fn initialize(specs: &[LayerSpec], data: &SeriesData, seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("an architecture needs at least one layer".into()));
        }
        if specs.last().map(LayerSpec::width) != Some(1) {
            return Err(Error::Config("the last layer must have width 1".into()));
        }
        let n = data.n_train();
        let times: Vec<f64> = (0..n).map(|i| i as f64 * data.delta).collect();
        let var_y = variance(&data.y);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut arch = Architecture {
            layers: Vec::new(),
            raw_noise: Matrix::scalar(inverse_softplus((0.01 * var_y).max(1e-6))),
            num_inputs: data.inputs.cols(),
            delta: data.delta,
        };
        let mut prev_width = data.inputs.cols();
        for (li, spec) in specs.iter().enumerate() {
            if spec.width() == 0 {
                return Err(Error::Config(format!("layer {li} has zero width")));
            }
            let in_width = if li > 0 && spec.skip_input() { prev_width + data.inputs.cols() } else { prev_width };
            let layer = match spec {
                LayerSpec::Dynamic { n_s, n_b, n_l, n_d, width, inducing, skip_input } => {
                    if *n_s == 0 || n_s % 2 != 0 {
                        return Err(Error::Config(format!("layer {li}: n_s must be a positive even number, got {n_s}")));
                    }
                    for (name, v) in [("n_b", n_b), ("n_d", n_d)] {
                        if *v != 0 && *v != in_width {
                            return Err(Error::Config(format!("layer {li}: {name} must be 0 or the input width {in_width}, got {v}")));
                        }
                    }
                    if *n_l == 0 {
                        return Err(Error::Config(format!("layer {li}: n_l must be at least 1 for a dynamic GP layer")));
                    }
                    let sig = LtiSignature { num_blocks: n_s / 2, num_inputs: in_width, num_noise: *n_l, has_b: *n_b > 0, has_d: *n_d > 0 };
                    let mut units = Vec::with_capacity(*width);
                    for _ in 0..*width {
                        let lti = LtiParams::init(sig, data.delta, &mut rng)?;
                        let z = select_inducing_times(&times, *inducing, rng.random())?;
                        units.push(GpUnit { variational: VariationalState::new(z.len(), 1e-2), params: UnitParams::Dynamic { lti, inducing: z } });
                    }
                    let mut layer = Layer { kind: LayerKind::Dynamic, units, skip_input: *skip_input };
                    if li + 1 < specs.len() {
                        arch.standardize_dynamic_outputs(&mut layer, &data.inputs, n)?;
                    }
                    layer
                }
                LayerSpec::Static { width, inducing, mean, skip_input } => {
                    let kind = mean.unwrap_or(if li == 0 { MeanKind::Linear } else { MeanKind::Constant });
                    let layer_inputs = arch.mean_inputs_to_next(&data.inputs, n, *skip_input)?;
                    if *inducing == 0 || *inducing > n {
                        return Err(Error::Cardinality { requested: *inducing, available: n });
                    }
                    let mut units = Vec::with_capacity(*width);
                    for _ in 0..*width {
                        let z = place_static_inducing(&layer_inputs, *inducing, &mut rng);
                        let mean = MeanParams::from_function(&match kind {
                            MeanKind::Zero => MeanFunction::Zero,
                            MeanKind::Constant => MeanFunction::Constant { value: 0.0 },
                            MeanKind::Linear => MeanFunction::Linear { weights: vec![0.0; in_width], bias: 0.0 },
                        });
                        units.push(GpUnit {
                            variational: VariationalState::new(*inducing, 1e-2),
                            params: UnitParams::Static { kernel: StaticParams::unit(in_width), mean, inducing: z },
                        });
                    }
                    Layer { kind: LayerKind::Static, units, skip_input: *skip_input }
                }
            };
            prev_width = layer.width();
            arch.layers.push(layer);
        }
        arch.validate()?;
        Ok(arch)
    }

    pub fn noise_variance(&self) -> f64 {
        softplus(self.raw_noise.item())
    }

    /// Input width expected by each layer.
    pub fn input_widths(&self) -> Vec<usize> {
        let mut prev = self.num_inputs;
        let mut out = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            out.push(if li > 0 && layer.skip_input { prev + self.num_inputs } else { prev });
            prev = layer.width();
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("an architecture needs at least one layer".into()));
        }
        if self.layers.last().map(Layer::width) != Some(1) {
            return Err(Error::Config("the last layer must have width 1".into()));
        }
        for (li, (layer, w)) in self.layers.iter().zip(self.input_widths()).enumerate() {
            for unit in &layer.units {
                let ok = match (&unit.params, layer.kind) {
                    (UnitParams::Dynamic { lti, inducing }, LayerKind::Dynamic) => {
                        lti.signature.num_inputs == w && inducing.len() == unit.num_inducing() && inducing.windows(2).all(|p| p[0] < p[1])
                    }
                    (UnitParams::Static { kernel, inducing, .. }, LayerKind::Static) => {
                        kernel.dim() == w && inducing.cols() == w && inducing.rows() == unit.num_inducing()
                    }
                    _ => false,
                };
                if !ok {
                    return Err(Error::Config(format!("layer {li} is inconsistent with input width {w}")));
                }
            }
        }
        Ok(())
    }

    /// Trainable tensors with descriptive names; hyperparameters are left
    /// out when `hyper` is false.
    pub fn tensors_mut(&mut self, hyper: bool) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for (li, layer) in self.layers.iter_mut().enumerate() {
            for (ui, unit) in layer.units.iter_mut().enumerate() {
                out.extend(unit.tensors_mut(hyper).into_iter().map(|(n, m)| (format!("layer{li}.unit{ui}.{n}"), m)));
            }
        }
        if hyper {
            out.push(("noise".into(), &mut self.raw_noise));
        }
        out
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool, hyper: bool) -> BoundArchitecture<'t> {
        let hyp = trainable && hyper;
        let mut layers = Vec::new();
        let mut leaves = Vec::new();
        for layer in &self.layers {
            let mut units = Vec::new();
            for unit in &layer.units {
                let bound = match &unit.params {
                    UnitParams::Dynamic { lti, inducing } => {
                        let b = lti.bind(tape, hyp);
                        if hyp {
                            leaves.extend(b.leaves());
                        }
                        BoundUnitParams::Dynamic { lti: b, inducing: inducing.clone() }
                    }
                    UnitParams::Static { kernel, mean, inducing } => {
                        let k = kernel.bind(tape, hyp);
                        let m = mean.bind(tape, hyp);
                        let z = if hyp { tape.leaf(inducing.clone()) } else { tape.constant(inducing.clone()) };
                        if hyp {
                            leaves.extend(k.leaves());
                            leaves.extend(m.leaves());
                            leaves.push(z);
                        }
                        BoundUnitParams::Static { kernel: k, mean: m, inducing: z }
                    }
                };
                let q = unit.variational.bind(tape, trainable);
                if trainable {
                    leaves.extend([q.mean, q.raw]);
                }
                units.push(BoundUnit { params: bound, q });
            }
            layers.push(BoundLayer { kind: layer.kind, units, skip_input: layer.skip_input });
        }
        let raw_noise = if hyp { tape.leaf(self.raw_noise.clone()) } else { tape.constant(self.raw_noise.clone()) };
        if hyp {
            leaves.push(raw_noise);
        }
        BoundArchitecture { layers, raw_noise, noise: raw_noise.softplus(), leaves, delta: self.delta }
    }

    /// Prior-mean forward pass (variational means at zero, no sampling) up
    /// to the current last layer, returning what the next layer would see.
    /// Scales `B` and `D` of each unit so that its prior-mean output has
    /// unit standard deviation over the first `n` rows. The layer above then
    /// sees inputs on the scale its unit lengthscales assume.
    fn standardize_dynamic_outputs(&self, layer: &mut Layer, inputs: &Matrix, n: usize) -> Result<()> {
        let h = self.mean_inputs_to_next(inputs, n, layer.skip_input && !self.layers.is_empty())?;
        for unit in &mut layer.units {
            if let UnitParams::Dynamic { lti, .. } = &mut unit.params {
                let sys = lti.to_system()?;
                let m = crate::lti_gp::mean_trajectory(&sys, &h)?;
                let sd = variance(&m).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    for t in [&mut lti.b_re, &mut lti.b_im, &mut lti.d] {
                        *t = t.scale(1.0 / sd);
                    }
                }
            }
        }
        Ok(())
    }

    fn mean_inputs_to_next(&self, inputs: &Matrix, n: usize, skip: bool) -> Result<Matrix> {
        let u = Matrix::from_fn(n, inputs.cols(), |i, j| inputs[(i, j)]);
        if self.layers.is_empty() {
            return Ok(u);
        }
        let mut h = u.clone();
        for li in 0..self.layers.len() {
            let marg = layer_conditional(self, li, &h, 0)?;
            h = marg.mean;
            if li + 1 < self.layers.len() && self.layers[li + 1].skip_input {
                h = hcat(&h, &u);
            }
        }
        Ok(if skip { hcat(&h, &u) } else { h })
    }
}

#[derive(Clone, Debug)]
pub enum BoundUnitParams<'t> {
    Dynamic { lti: BoundLti<'t>, inducing: Vec<usize> },
    Static { kernel: BoundStatic<'t>, mean: BoundMean<'t>, inducing: Var<'t> },
}

#[derive(Clone, Debug)]
pub struct BoundUnit<'t> {
    pub params: BoundUnitParams<'t>,
    pub q: BoundVariational<'t>,
}

#[derive(Clone, Debug)]
pub struct BoundLayer<'t> {
    pub kind: LayerKind,
    pub units: Vec<BoundUnit<'t>>,
    pub skip_input: bool,
}

#[derive(Clone, Debug)]
pub struct BoundArchitecture<'t> {
    pub layers: Vec<BoundLayer<'t>>,
    pub raw_noise: Var<'t>,
    pub noise: Var<'t>,
    /// Trainable leaves in the order of [`Architecture::tensors_mut`].
    pub leaves: Vec<Var<'t>>,
    pub delta: f64,
}

pub(crate) fn hcat(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), a.cols() + b.cols(), |i, j| if j < a.cols() { a[(i, j)] } else { b[(i, j - a.cols())] })
}

fn variance(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Inducing inputs for a static unit: for one-dimensional inputs, evenly
/// spaced empirical quantiles; otherwise a random subset of rows.
fn place_static_inducing(x: &Matrix, m: usize, rng: &mut impl Rng) -> Matrix {
    let n = x.rows();
    if x.cols() == 1 {
        let mut v = x.as_slice().to_vec();
        v.sort_by(f64::total_cmp);
        let pick = |k: usize| v[((k as f64 + 0.5) / m as f64 * n as f64) as usize];
        let mut z: Vec<f64> = (0..m).map(pick).collect();
        // Separate ties so the inducing kernel matrix stays well conditioned.
        let spread = (v[n - 1] - v[0]).max(1e-3);
        for k in 1..m {
            if z[k] <= z[k - 1] {
                z[k] = z[k - 1] + 1e-3 * spread / m as f64;
            }
        }
        Matrix::column(z)
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..m {
            let j = rng.random_range(i..n);
            idx.swap(i, j);
        }
        Matrix::from_fn(m, x.cols(), |i, j| x[(idx[i], j)])
    }
}
