//! Experiment configuration, the train/predict pipeline and its artifacts.

mod data;
mod gradcheck;

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

pub use data::{fourier_features, grid_step, load_csv, standardize, CsvSchema, Standardization, TimeSeriesDataset};
pub use gradcheck::{gradient_suite, GradientReport};

use crate::deep_gp::{predict, train_svi, Architecture, LayerSpec, PredictiveSamples, SeriesData, TrainConfig, TrainTrace};
use crate::diffnum::Matrix;
use crate::error::{Error, Result};
use crate::metrics::{crps_from_samples, mae, rmse, ForecastScores};
use crate::simulator::{generate_wiener_dataset, WienerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Csv {
        path: PathBuf,
        #[serde(flatten)]
        schema: CsvSchema,
        /// Leading rows used for training; the rest is the test split.
        train_rows: usize,
        /// `(cycles per time unit, harmonics)` pairs appended to the inputs.
        #[serde(default)]
        fourier: Vec<(f64, usize)>,
    },
    SyntheticWiener(WienerConfig),
}

impl DatasetSpec {
    pub fn load(&self) -> Result<TimeSeriesDataset> {
        match self {
            DatasetSpec::Csv { path, schema, train_rows, fourier } => {
                let ds = load_csv(path, schema, Some(*train_rows))?;
                if fourier.is_empty() {
                    return Ok(ds);
                }
                let extra = fourier_features(ds.len(), ds.delta, fourier);
                ds.with_extra_inputs(&extra)
            }
            DatasetSpec::SyntheticWiener(cfg) => Ok(generate_wiener_dataset(cfg)?.into()),
        }
    }

    fn input_width(&self) -> usize {
        match self {
            DatasetSpec::Csv { schema, fourier, .. } => schema.inputs.len() + fourier.iter().map(|p| 2 * p.1).sum::<usize>(),
            DatasetSpec::SyntheticWiener(_) => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictionConfig {
    pub num_samples: usize,
    /// Add observation noise to the predictive draws.
    pub observation_noise: bool,
    pub seed: u64,
    /// Leading test rows left out of the scores.
    pub skip_transient: usize,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        PredictionConfig { num_samples: 300, observation_noise: true, seed: 0, skip_transient: 0 }
    }
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub architecture: Vec<LayerSpec>,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub prediction: PredictionConfig,
    #[serde(default = "yes")]
    pub standardize_inputs: bool,
    #[serde(default = "yes")]
    pub standardize_output: bool,
    /// Directory for artifacts; nothing is written when absent.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Reads a JSON config and resolves relative paths against its folder.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DatasetSpec::Csv { path: p, .. } = &mut cfg.dataset {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(out) = &mut cfg.output_dir {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let DatasetSpec::Csv { path, .. } = &self.dataset {
            if !path.is_file() {
                return Err(Error::Config(format!("dataset file {} does not exist", path.display())));
            }
        }
        if self.architecture.is_empty() {
            return Err(Error::Config("the architecture has no layers".into()));
        }
        let u = self.dataset.input_width();
        let mut prev = u;
        for (li, spec) in self.architecture.iter().enumerate() {
            let width = if li > 0 && spec.skip_input() { prev + u } else { prev };
            if let LayerSpec::Dynamic { n_b, n_d, .. } = spec {
                if (*n_b != 0 && *n_b != width) || (*n_d != 0 && *n_d != width) {
                    return Err(Error::Config(format!("layer {li}: n_b and n_d must be 0 or the input width {width}")));
                }
            }
            prev = spec.width();
        }
        if prev != 1 {
            return Err(Error::Config("the last layer must have width 1".into()));
        }
        if self.prediction.num_samples == 0 {
            return Err(Error::Config("prediction needs at least one sample".into()));
        }
        Ok(())
    }
}

/// Everything needed to predict with a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub architecture: Architecture,
    pub standardization: Standardization,
    pub dataset: DatasetSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Forecast {
    pub times: Vec<f64>,
    /// `S x h` draws in original units.
    pub samples: Matrix,
    pub truth: Vec<f64>,
}

impl Forecast {
    fn predictive(&self) -> PredictiveSamples {
        PredictiveSamples { samples: self.samples.clone(), index: Vec::new() }
    }

    pub fn mean(&self) -> Vec<f64> {
        self.predictive().mean()
    }

    pub fn quantile(&self, q: f64) -> Vec<f64> {
        self.predictive().quantile(q)
    }

    /// Scores from column `skip` on.
    pub fn scores(&self, skip: usize) -> Result<ForecastScores> {
        let h = self.truth.len();
        if skip >= h {
            return Err(Error::Config(format!("cannot skip {skip} of {h} test rows")));
        }
        let mean = self.mean();
        let tail = Matrix::from_fn(self.samples.rows(), h - skip, |i, j| self.samples[(i, j + skip)]);
        Ok(ForecastScores {
            rmse: rmse(&self.truth[skip..], &mean[skip..])?,
            mae: mae(&self.truth[skip..], &mean[skip..])?,
            crps: crps_from_samples(&tail, &self.truth[skip..])?,
        })
    }

    /// `time,mean,p2.5,p16,p84,p97.5,truth`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mean = self.mean();
        let qs: Vec<Vec<f64>> = [0.025, 0.16, 0.84, 0.975].iter().map(|&q| self.quantile(q)).collect();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["time", "mean", "p2.5", "p16", "p84", "p97.5", "truth"])?;
        for k in 0..self.times.len() {
            let mut row = vec![self.times[k], mean[k]];
            row.extend(qs.iter().map(|q| q[k]));
            row.push(self.truth[k]);
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// `time,s0,s1,…`, one row per time.
    pub fn write_samples_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["time".to_string()];
        header.extend((0..self.samples.rows()).map(|s| format!("s{s}")));
        w.write_record(&header)?;
        for k in 0..self.times.len() {
            let mut row = vec![self.times[k].to_string()];
            row.extend(self.samples.col_vec(k).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Predictive draws for rows `from..` of `ds` (original units).
pub fn forecast(bundle: &ModelBundle, ds: &TimeSeriesDataset, from: usize, num_samples: usize, observation_noise: bool, seed: u64) -> Result<Forecast> {
    if from >= ds.len() {
        return Err(Error::Config(format!("forecast start {from} beyond {} rows", ds.len())));
    }
    let tr = &bundle.standardization;
    let inputs = tr.apply_inputs(&ds.inputs);
    let horizon: Vec<usize> = (from..ds.len()).collect();
    let pred = predict(&bundle.architecture, &inputs, &horizon, num_samples, observation_noise, seed)?;
    Ok(Forecast {
        times: ds.times[from..].to_vec(),
        samples: pred.samples.map(|v| tr.invert_output(v)),
        truth: ds.y[from..].to_vec(),
    })
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub bundle: ModelBundle,
    pub trace: TrainTrace,
    pub forecast: Forecast,
    pub scores: ForecastScores,
}

/// Trains on the training split and forecasts the test split.
pub fn train_and_forecast(cfg: &ExperimentConfig, ds: &TimeSeriesDataset) -> Result<ExperimentOutcome> {
    if ds.split >= ds.len() {
        return Err(Error::Config("the dataset has no test rows".into()));
    }
    let (scaled, standardization) = standardize(ds, cfg.standardize_inputs, cfg.standardize_output)?;
    let series = SeriesData::new(scaled.inputs.clone(), scaled.y_train().to_vec(), scaled.delta)?;
    let init = Architecture::initialize(&cfg.architecture, &series, cfg.training.seed)?;
    let (architecture, trace) = train_svi(&init, &series, &cfg.training)?;
    let bundle = ModelBundle { architecture, standardization, dataset: cfg.dataset.clone() };
    let p = &cfg.prediction;
    let forecast = forecast(&bundle, ds, ds.split, p.num_samples, p.observation_noise, p.seed)?;
    let scores = forecast.scores(p.skip_transient)?;
    Ok(ExperimentOutcome { bundle, trace, forecast, scores })
}

#[derive(Serialize)]
struct MetricsRecord {
    rmse: f64,
    mae: f64,
    crps: f64,
    runtime_per_batch_seconds: f64,
}

/// Loads data, trains, forecasts and, when `output_dir` is set, writes
/// `metrics.json`, `predictions.csv`, `samples.csv`, `trace.csv`,
/// `model.json` and `config.json`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let ds = cfg.dataset.load()?;
    let outcome = train_and_forecast(cfg, &ds)?;
    info!("test scores: {:?}", outcome.scores);
    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir)?;
        let s = outcome.scores;
        let record = MetricsRecord { rmse: s.rmse, mae: s.mae, crps: s.crps, runtime_per_batch_seconds: outcome.trace.seconds_per_batch };
        fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&record)?)?;
        outcome.forecast.write_csv(&dir.join("predictions.csv"))?;
        outcome.forecast.write_samples_csv(&dir.join("samples.csv"))?;
        let mut w = csv::Writer::from_path(dir.join("trace.csv"))?;
        w.write_record(["iteration", "objective"])?;
        for (i, v) in outcome.trace.objective.iter().enumerate() {
            w.write_record([i.to_string(), v.to_string()])?;
        }
        w.flush()?;
        fs::write(dir.join("model.json"), serde_json::to_string(&outcome.bundle)?)?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    }
    Ok(outcome)
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let values = record
            .iter()
            .enumerate()
            .map(|(c, v)| v.trim().parse::<f64>().map_err(|_| Error::Ingestion { row, column: header[c].clone() }))
            .collect::<Result<Vec<_>>>()?;
        rows.push(values);
    }
    Ok((header, rows))
}

fn is_sample_column(name: &str) -> bool {
    name.strip_prefix('s').is_some_and(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
}

/// Scores a prediction file against a truth file, row by row. Sample
/// columns `s0, s1, …` give the predictive distribution; otherwise the
/// `mean` column (or the last column) is a point forecast. Truth is read
/// from `truth`, `y`, or the last column.
pub fn evaluate_files(pred: &Path, truth: &Path) -> Result<ForecastScores> {
    let (ph, prows) = read_table(pred)?;
    let (th, trows) = read_table(truth)?;
    if prows.len() != trows.len() || prows.is_empty() {
        return Err(Error::Shape { op: "evaluate", detail: format!("{} prediction rows and {} truth rows", prows.len(), trows.len()) });
    }
    let pick = |h: &[String], names: &[&str]| names.iter().find_map(|n| h.iter().position(|c| c == n)).unwrap_or(h.len() - 1);
    let t_col = pick(&th, &["truth", "y"]);
    let y: Vec<f64> = trows.iter().map(|r| r[t_col]).collect();
    let sample_cols: Vec<usize> = (0..ph.len()).filter(|&c| is_sample_column(&ph[c])).collect();
    let samples = if sample_cols.is_empty() {
        let c = pick(&ph, &["mean"]);
        Matrix::from_fn(1, prows.len(), |_, j| prows[j][c])
    } else {
        Matrix::from_fn(sample_cols.len(), prows.len(), |i, j| prows[j][sample_cols[i]])
    };
    let point = PredictiveSamples { samples: samples.clone(), index: Vec::new() }.mean();
    Ok(ForecastScores { rmse: rmse(&y, &point)?, mae: mae(&y, &point)?, crps: crps_from_samples(&samples, &y)? })
}
