//! CSV ingestion, calendar features and standardization.

use std::f64::consts::PI;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::diffnum::Matrix;
use crate::error::{Error, Result};
use crate::simulator::GeneratedDataset;

/// Column names to read from a CSV file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    #[serde(default = "default_time")]
    pub time: String,
    pub inputs: Vec<String>,
    pub output: String,
}

fn default_time() -> String {
    "time".into()
}

/// A uniformly sampled series. Rows before `split` are training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesDataset {
    pub times: Vec<f64>,
    /// `n x n_u`
    pub inputs: Matrix,
    pub y: Vec<f64>,
    pub split: usize,
    pub delta: f64,
}

impl TimeSeriesDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn num_inputs(&self) -> usize {
        self.inputs.cols()
    }

    pub fn y_train(&self) -> &[f64] {
        &self.y[..self.split]
    }

    /// Appends columns to the inputs.
    pub fn with_extra_inputs(mut self, extra: &Matrix) -> Result<Self> {
        if extra.rows() != self.len() {
            return Err(Error::Shape { op: "with_extra_inputs", detail: format!("{} rows for {} samples", extra.rows(), self.len()) });
        }
        self.inputs = crate::deep_gp::hcat(&self.inputs, extra);
        Ok(self)
    }
}

impl From<GeneratedDataset> for TimeSeriesDataset {
    fn from(g: GeneratedDataset) -> Self {
        TimeSeriesDataset { times: g.times, inputs: g.inputs, y: g.y, split: g.split, delta: g.delta }
    }
}

/// Sampling time of a grid; errors with the first index whose step departs
/// from the mean step by more than `1e-9` relative.
pub fn grid_step(times: &[f64]) -> Result<f64> {
    if times.len() < 2 {
        return Err(Error::Contract("a time series needs at least two samples".into()));
    }
    let delta = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
    if !(delta > 0.0) {
        return Err(Error::Grid { index: 1 });
    }
    for k in 1..times.len() {
        if ((times[k] - times[k - 1]) - delta).abs() > 1e-9 * delta {
            return Err(Error::Grid { index: k });
        }
    }
    Ok(delta)
}

/// Reads a headered, comma-separated file. `train_rows` defaults to all
/// rows.
pub fn load_csv(path: &Path, schema: &CsvSchema, train_rows: Option<usize>) -> Result<TimeSeriesDataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    let position = |name: &str| {
        header.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Config(format!("column `{name}` not found in {}", path.display())))
    };
    let t_col = position(&schema.time)?;
    let u_cols = schema.inputs.iter().map(|c| position(c)).collect::<Result<Vec<_>>>()?;
    let y_col = position(&schema.output)?;
    let mut times = Vec::new();
    let mut u = Vec::new();
    let mut y = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let field = |col: usize| -> Result<f64> {
            let missing = || Error::Ingestion { row, column: header.get(col).unwrap_or("?").to_string() };
            let v: f64 = record.get(col).map(str::trim).filter(|s| !s.is_empty()).ok_or_else(missing)?.parse().map_err(|_| missing())?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(missing())
            }
        };
        times.push(field(t_col)?);
        for &c in &u_cols {
            u.push(field(c)?);
        }
        y.push(field(y_col)?);
    }
    let delta = grid_step(&times)?;
    let n = times.len();
    let split = train_rows.unwrap_or(n);
    if split == 0 || split > n {
        return Err(Error::Config(format!("training rows {split} must be in 1..={n}")));
    }
    let inputs = Matrix::new(n, u_cols.len(), u);
    info!("loaded {}: n = {n}, n_u = {}, delta = {delta}", path.display(), u_cols.len());
    Ok(TimeSeriesDataset { times, inputs, y, split, delta })
}

/// Harmonics `cos(2π h m t), sin(2π h m t)` for `h = 1..=k` and each
/// `(m, k)` in `periods`, with `t = iδ`.
pub fn fourier_features(n: usize, delta: f64, periods: &[(f64, usize)]) -> Matrix {
    let cols: usize = periods.iter().map(|p| 2 * p.1).sum();
    let mut out = Matrix::zeros(n, cols);
    for i in 0..n {
        let t = i as f64 * delta;
        let mut j = 0;
        for &(m, k) in periods {
            for h in 1..=k {
                let arg = 2.0 * PI * t * m * h as f64;
                out[(i, j)] = arg.cos();
                out[(i, j + 1)] = arg.sin();
                j += 2;
            }
        }
    }
    out
}

/// Affine maps fitted on the training split. Columns with zero variance
/// keep mean 0 and scale 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_mean: f64,
    pub output_scale: f64,
}

impl Standardization {
    pub fn identity(num_inputs: usize) -> Self {
        Standardization { input_mean: vec![0.0; num_inputs], input_scale: vec![1.0; num_inputs], output_mean: 0.0, output_scale: 1.0 }
    }

    pub fn apply_inputs(&self, u: &Matrix) -> Matrix {
        Matrix::from_fn(u.rows(), u.cols(), |i, j| (u[(i, j)] - self.input_mean[j]) / self.input_scale[j])
    }

    pub fn apply_output(&self, y: f64) -> f64 {
        (y - self.output_mean) / self.output_scale
    }

    pub fn invert_output(&self, z: f64) -> f64 {
        z * self.output_scale + self.output_mean
    }
}

fn moments(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Z-scores inputs and/or output with training-split statistics.
pub fn standardize(ds: &TimeSeriesDataset, inputs: bool, output: bool) -> Result<(TimeSeriesDataset, Standardization)> {
    if ds.split == 0 {
        return Err(Error::Contract("standardization needs a non-empty training split".into()));
    }
    let mut tr = Standardization::identity(ds.num_inputs());
    if inputs {
        for j in 0..ds.num_inputs() {
            let (m, s) = moments((0..ds.split).map(|i| ds.inputs[(i, j)]));
            if s > 0.0 {
                tr.input_mean[j] = m;
                tr.input_scale[j] = s;
            } else {
                warn!("input column {j} is constant on the training split; left unscaled");
            }
        }
    }
    if output {
        let (m, s) = moments(ds.y_train().iter().copied());
        if s > 0.0 {
            tr.output_mean = m;
            tr.output_scale = s;
        } else {
            warn!("output is constant on the training split; left unscaled");
        }
    }
    let out = TimeSeriesDataset {
        times: ds.times.clone(),
        inputs: tr.apply_inputs(&ds.inputs),
        y: ds.y.iter().map(|&v| tr.apply_output(v)).collect(),
        split: ds.split,
        delta: ds.delta,
    };
    Ok((out, tr))
}
