//! Matérn-3/2 kernels and mean functions over real-vector covariates.

use serde::{Deserialize, Serialize};

use crate::diffnum::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::lti_gp::diff::{inverse_softplus, softplus};

const SQRT3: f64 = 1.732_050_807_568_877_2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matern32Params {
    pub lengthscales: Vec<f64>,
    pub scale: f64,
}

impl Matern32Params {
    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.iter().any(|&l| !(l > 0.0)) || !(self.scale > 0.0) {
            return Err(Error::Domain {
                op: "matern32",
                detail: format!("lengthscales {:?} and scale {} must be positive", self.lengthscales, self.scale),
            });
        }
        Ok(())
    }
}

/// `σ²(1+√3γ)e^{-√3γ}` with `γ` the lengthscale-weighted distance.
pub fn matern32(x: &[f64], x_prime: &[f64], params: &Matern32Params) -> Result<f64> {
    params.validate()?;
    let d = params.lengthscales.len();
    if x.len() != d || x_prime.len() != d {
        return Err(Error::Shape { op: "matern32", detail: format!("points of length {} and {} for {d} lengthscales", x.len(), x_prime.len()) });
    }
    let g2: f64 = x.iter().zip(x_prime).zip(&params.lengthscales).map(|((a, b), l)| ((a - b) / l).powi(2)).sum();
    let r = SQRT3 * g2.sqrt();
    Ok(params.scale * (1.0 + r) * (-r).exp())
}

pub fn kernel_cross(x: &Matrix, x_prime: &Matrix, params: &Matern32Params) -> Result<Matrix> {
    params.validate()?;
    let d = params.lengthscales.len();
    if x.cols() != d || x_prime.cols() != d {
        return Err(Error::Shape { op: "kernel_cross", detail: format!("{} and {} columns for {d} lengthscales", x.cols(), x_prime.cols()) });
    }
    let mut out = Matrix::zeros(x.rows(), x_prime.rows());
    for i in 0..x.rows() {
        for j in 0..x_prime.rows() {
            out[(i, j)] = matern32(x.row_slice(i), x_prime.row_slice(j), params)?;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanFunction {
    Zero,
    Constant { value: f64 },
    Linear { weights: Vec<f64>, bias: f64 },
}

pub fn mean_eval(mean: &MeanFunction, x: &Matrix) -> Result<Vec<f64>> {
    match mean {
        MeanFunction::Zero => Ok(vec![0.0; x.rows()]),
        MeanFunction::Constant { value } => Ok(vec![*value; x.rows()]),
        MeanFunction::Linear { weights, bias } => {
            if weights.len() != x.cols() {
                return Err(Error::Shape { op: "mean_eval", detail: format!("{} weights for {} columns", weights.len(), x.cols()) });
            }
            Ok((0..x.rows()).map(|i| bias + x.row_slice(i).iter().zip(weights).map(|(a, w)| a * w).sum::<f64>()).collect())
        }
    }
}

/// Free reals behind a Matérn-3/2 kernel: both lengthscales and amplitude
/// are softplus-transformed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticParams {
    /// `1 x d`
    pub raw_lengthscales: Matrix,
    /// `1 x 1`
    pub raw_scale: Matrix,
}

impl StaticParams {
    pub fn new(params: &Matern32Params) -> Result<Self> {
        params.validate()?;
        Ok(StaticParams {
            raw_lengthscales: Matrix::row(params.lengthscales.iter().map(|&l| inverse_softplus(l)).collect()),
            raw_scale: Matrix::scalar(inverse_softplus(params.scale)),
        })
    }

    /// Unit lengthscales and amplitude.
    pub fn unit(dim: usize) -> Self {
        Self::new(&Matern32Params { lengthscales: vec![1.0; dim], scale: 1.0 }).expect("unit parameters are valid")
    }

    pub fn dim(&self) -> usize {
        self.raw_lengthscales.cols()
    }

    pub fn params(&self) -> Matern32Params {
        Matern32Params {
            lengthscales: self.raw_lengthscales.as_slice().iter().map(|&v| softplus(v)).collect(),
            scale: softplus(self.raw_scale.item()),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        vec![("lengthscales", &self.raw_lengthscales), ("scale", &self.raw_scale)]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![("lengthscales", &mut self.raw_lengthscales), ("scale", &mut self.raw_scale)]
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundStatic<'t> {
        let put = |m: &Matrix| if trainable { tape.leaf(m.clone()) } else { tape.constant(m.clone()) };
        let raw_lengthscales = put(&self.raw_lengthscales);
        let raw_scale = put(&self.raw_scale);
        BoundStatic { raw_lengthscales, raw_scale, lengthscales: raw_lengthscales.softplus(), scale: raw_scale.softplus() }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundStatic<'t> {
    pub raw_lengthscales: Var<'t>,
    pub raw_scale: Var<'t>,
    pub lengthscales: Var<'t>,
    pub scale: Var<'t>,
}

impl<'t> BoundStatic<'t> {
    pub fn leaves(&self) -> Vec<Var<'t>> {
        vec![self.raw_lengthscales, self.raw_scale]
    }

    /// Rows divided by the lengthscales.
    pub fn whiten(&self, x: Var<'t>) -> Var<'t> {
        x / self.lengthscales
    }

    /// Kernel between already whitened point sets.
    pub fn cross_whitened(&self, xs: Var<'t>, zs: Var<'t>) -> Var<'t> {
        xs.sq_dist(zs).matern32() * self.scale
    }

    pub fn cross(&self, x: Var<'t>, z: Var<'t>) -> Var<'t> {
        self.cross_whitened(self.whiten(x), self.whiten(z))
    }
}

/// Trainable counterpart of [`MeanFunction`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanParams {
    Zero,
    /// `1 x 1`
    Constant { value: Matrix },
    /// `d x 1` weights and `1 x 1` bias.
    Linear { weights: Matrix, bias: Matrix },
}

impl MeanParams {
    pub fn from_function(mean: &MeanFunction) -> Self {
        match mean {
            MeanFunction::Zero => MeanParams::Zero,
            MeanFunction::Constant { value } => MeanParams::Constant { value: Matrix::scalar(*value) },
            MeanFunction::Linear { weights, bias } => {
                MeanParams::Linear { weights: Matrix::column(weights.clone()), bias: Matrix::scalar(*bias) }
            }
        }
    }

    pub fn function(&self) -> MeanFunction {
        match self {
            MeanParams::Zero => MeanFunction::Zero,
            MeanParams::Constant { value } => MeanFunction::Constant { value: value.item() },
            MeanParams::Linear { weights, bias } => MeanFunction::Linear { weights: weights.as_slice().to_vec(), bias: bias.item() },
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        match self {
            MeanParams::Zero => vec![],
            MeanParams::Constant { value } => vec![("mean.value", value)],
            MeanParams::Linear { weights, bias } => vec![("mean.weights", weights), ("mean.bias", bias)],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        match self {
            MeanParams::Zero => vec![],
            MeanParams::Constant { value } => vec![("mean.value", value)],
            MeanParams::Linear { weights, bias } => vec![("mean.weights", weights), ("mean.bias", bias)],
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundMean<'t> {
        let put = |m: &Matrix| if trainable { tape.leaf(m.clone()) } else { tape.constant(m.clone()) };
        match self {
            MeanParams::Zero => BoundMean::Zero,
            MeanParams::Constant { value } => BoundMean::Constant(put(value)),
            MeanParams::Linear { weights, bias } => BoundMean::Linear(put(weights), put(bias)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum BoundMean<'t> {
    Zero,
    Constant(Var<'t>),
    Linear(Var<'t>, Var<'t>),
}

impl<'t> BoundMean<'t> {
    pub fn leaves(&self) -> Vec<Var<'t>> {
        match *self {
            BoundMean::Zero => vec![],
            BoundMean::Constant(c) => vec![c],
            BoundMean::Linear(w, b) => vec![w, b],
        }
    }

    /// Mean at each row of `x`, as an `n x 1` column.
    pub fn eval(&self, x: Var<'t>) -> Var<'t> {
        let tape = x.tape();
        let zeros = tape.constant(Matrix::zeros(x.rows(), 1));
        match *self {
            BoundMean::Zero => zeros,
            BoundMean::Constant(c) => zeros + c,
            BoundMean::Linear(w, b) => x.matmul(w) + b,
        }
    }
}
