use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use dynogp::harness::{evaluate_files, forecast, gradient_suite, run_experiment, ExperimentConfig, ModelBundle};
use dynogp::simulator::{generate_wiener_dataset, Nonlinearity, TrueSystem, WienerConfig};
use dynogp::{Error, Result};

// Tolerances of the gradient suite.
const LOG_ML_TOL: f64 = 1e-4;
const ELBO_TOL: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "dynogp", version, about = "Deep dynamic Gaussian processes for system identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Shape {
    PositivePart,
    Quadratic,
    Identity,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a Wiener system and write it as CSV (time,u1,u2,y).
    Simulate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "wiener.csv")]
        out: PathBuf,
        /// Also write the full dataset record as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        state_dim: usize,
        #[arg(long, value_enum, default_value_t = Shape::PositivePart)]
        nonlinearity: Shape,
        #[arg(long, default_value_t = 0.01)]
        delta: f64,
        #[arg(long, default_value_t = 25.0)]
        t_end: f64,
        #[arg(long, default_value_t = 15.0)]
        t_split: f64,
        /// Measurement-noise std as a fraction of the training output std.
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
    },
    /// Train on a JSON experiment config and write all artifacts.
    Fit {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` of the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the number of training iterations.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Forecast the test split with a saved model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "predictions.csv")]
        out: PathBuf,
        /// Also write the raw draws (time,s0,s1,...).
        #[arg(long)]
        samples_out: Option<PathBuf>,
        #[arg(long, default_value_t = 300)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// First row to forecast; defaults to the start of the test split.
        #[arg(long)]
        from: Option<usize>,
        /// Leave observation noise out of the draws.
        #[arg(long)]
        latent: bool,
    },
    /// Score a prediction CSV against a truth CSV.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Check AD gradients of the training objectives against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        configs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn print_json(value: serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

fn simulate(cfg: WienerConfig, out: &Path, json: Option<&Path>) -> Result<()> {
    let ds = generate_wiener_dataset(&cfg)?;
    ds.write_csv(out)?;
    if let Some(path) = json {
        std::fs::write(path, serde_json::to_string(&ds)?)?;
    }
    info!("wrote {} rows ({} for training) to {}", ds.times.len(), ds.split, out.display());
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate { seed, out, json, state_dim, nonlinearity, delta, t_end, t_split, noise } => {
            let nonlinearity = match nonlinearity {
                Shape::PositivePart => Nonlinearity::PositivePart,
                Shape::Quadratic => Nonlinearity::Quadratic,
                Shape::Identity => Nonlinearity::Identity,
            };
            let cfg = WienerConfig { system: TrueSystem::RankOne { state_dim }, nonlinearity, delta, t_end, t_split, noise_std_fraction: noise, seed };
            simulate(cfg, &out, json.as_deref())
        }
        Command::Fit { config, out, iterations } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if out.is_some() {
                cfg.output_dir = out;
            }
            if let Some(n) = iterations {
                cfg.training.iterations = n;
            }
            let outcome = run_experiment(&cfg)?;
            print_json(serde_json::to_value(outcome.scores)?)
        }
        Command::Predict { model, out, samples_out, samples, seed, from, latent } => {
            let bundle: ModelBundle = serde_json::from_str(&std::fs::read_to_string(&model)?)?;
            let ds = bundle.dataset.load()?;
            let fc = forecast(&bundle, &ds, from.unwrap_or(ds.split), samples, !latent, seed)?;
            fc.write_csv(&out)?;
            if let Some(path) = samples_out {
                fc.write_samples_csv(&path)?;
            }
            print_json(serde_json::to_value(fc.scores(0)?)?)
        }
        Command::Evaluate { pred, truth } => print_json(serde_json::to_value(evaluate_files(&pred, &truth)?)?),
        Command::Gradcheck { configs, seed } => {
            let report = gradient_suite(configs, seed)?;
            println!("log-ML worst relative error {:.3e} (tolerance {LOG_ML_TOL:e})", report.worst_log_ml());
            println!("ELBO worst relative error   {:.3e} (tolerance {ELBO_TOL:e})", report.worst_elbo());
            if report.worst_log_ml() < LOG_ML_TOL && report.worst_elbo() < ELBO_TOL {
                Ok(())
            } else {
                Err(Error::Contract("gradient check exceeded its tolerance".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
