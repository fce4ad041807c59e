//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines show up in plain `cargo test` output.
//!
//! Criterion 10 needs the coupled electric drives file; point
//! `DYNOGP_CED_CSV` at a CSV with columns `time,u,y` (override the names
//! with `DYNOGP_CED_INPUT` / `DYNOGP_CED_OUTPUT`). Artifacts go to
//! `DYNOGP_CED_OUT` when set.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, Matrix2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StdNormal};

use dynogp::deep_gp::{elbo, select_inducing_times, train_svi, Architecture, LayerSpec, MeanKind, SeriesData, TrainConfig, Window};
use dynogp::diffnum::Matrix;
use dynogp::exact_gp::{log_marginal_likelihood, posterior_predict, Design, GpData, GpKernel, GpModel};
use dynogp::harness::{gradient_suite, run_experiment, train_and_forecast, CsvSchema, DatasetSpec, ExperimentConfig, PredictionConfig, TimeSeriesDataset};
use dynogp::lti_gp::{
    dense_mean_trajectory, expm_dense, kernel_value, lyapunov_dense, matern32_state_space, mean_trajectory, realify, steady_state_block,
    ComplexDiagonalLti, DenseKernel,
};
use dynogp::metrics::{crps_from_samples, crps_single, mae, rmse};
use dynogp::simulator::{generate_wiener_dataset, simulate_lti, InitialState, WienerConfig};
use dynogp::static_gp::{Matern32Params, MeanFunction, MeanParams, StaticParams};

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn matern(tau: f64, ell: f64, s2: f64) -> f64 {
    let r = 3f64.sqrt() * tau / ell;
    3f64.sqrt() * s2 * (1.0 + r) * (-r).exp()
}

fn c1_matern_equivalence() -> Verdict {
    let mut worst: f64 = 0.0;
    for ell in [0.3, 1.0, 3.0] {
        for s2 in [0.5, 2.0] {
            let sys = matern32_state_space(ell, s2).unwrap();
            let sigma = lyapunov_dense(&sys.a, &(&sys.l * sys.l.transpose())).unwrap();
            for k in 0..200 {
                let tau = 5.0 * ell * k as f64 / 199.0;
                let got = (&sys.c * expm_dense(&sys.a, tau).unwrap() * &sigma * sys.c.transpose())[(0, 0)];
                let want = matern(tau, ell, s2);
                worst = worst.max((got - want).abs() / want.abs());
            }
        }
    }
    verdict(worst < 1e-8, format!("max relative error {worst:.2e} over 1200 lags (limit 1e-8)"))
}

fn random_stable(rng: &mut ChaCha8Rng) -> ComplexDiagonalLti {
    let nb = rng.random_range(1..=8);
    let nu = rng.random_range(1..=3);
    let nl = rng.random_range(1..=2);
    let mut cx = |s: f64| Complex64::new(rng.random_range(-s..s), rng.random_range(-s..s));
    let b = DMatrix::from_fn(nb, nu, |_, _| cx(1.0));
    let l = DMatrix::from_fn(nb, nl, |_, _| cx(1.0));
    let c = (0..nb).map(|_| cx(1.0)).collect();
    let lambda = (0..nb).map(|_| Complex64::new(-rng.random_range(0.05..5.0), rng.random_range(-20.0..20.0))).collect();
    let d = (0..nu).map(|_| rng.random_range(-1.0..1.0)).collect();
    ComplexDiagonalLti::new(lambda, b, l, c, d, rng.random_range(0.01..0.2)).unwrap()
}

fn c2_closed_form_vs_dense() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_k, mut worst_m): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let sys = random_stable(&mut rng);
        let dense = realify(&sys);
        let oracle = DenseKernel::new(&dense).unwrap();
        for k in 0..10 {
            let tau = k as f64 * 3.0 * sys.delta;
            worst_k = worst_k.max((kernel_value(&sys, tau).unwrap() - oracle.value(tau).unwrap()).abs());
        }
        let u = Matrix::from_fn(200, sys.num_inputs(), |_, _| rng.random_range(-1.0..1.0));
        let fast = mean_trajectory(&sys, &u).unwrap();
        let slow = dense_mean_trajectory(&dense, &u, sys.delta).unwrap();
        let scale = slow.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        worst_m = worst_m.max(fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale);
    }
    verdict(
        worst_k < 1e-9 && worst_m < 1e-9,
        format!("100 systems: kernel max abs error {worst_k:.2e}, normalized mean error {worst_m:.2e} (limit 1e-9)"),
    )
}

fn c3_lyapunov_residual() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let lambda = Complex64::new(-rng.random_range(1e-2..10.0), rng.random_range(-50.0..50.0));
        let nl = rng.random_range(1..=3);
        let l: Vec<Complex64> = (0..nl).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        let s = steady_state_block(lambda, &l).unwrap();
        // block of the stacked (x, x̄) state: A = diag(λ, λ̄), noise rows (L, L̄)
        let a = Matrix2::new(lambda, Complex64::ZERO, Complex64::ZERO, lambda.conj());
        let mut q = Matrix2::<Complex64>::zeros();
        for v in &l {
            let col = nalgebra::Vector2::new(*v, v.conj());
            q += col * col.adjoint();
        }
        let resid = (a * s + s * a.adjoint() + q).norm() / (1.0 + q.norm());
        worst = worst.max(resid);
    }
    verdict(worst < 1e-12, format!("1000 blocks: max relative residual {worst:.2e} (limit 1e-12)"))
}

fn c4_exact_gp() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, ell, s2, noise) = (30, 0.9, 1.4, 0.15);
    let x = Matrix::from_fn(n, 1, |_, _| rng.random_range(-3.0..3.0));
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let model = |noise: f64| {
        let kernel = StaticParams::new(&Matern32Params { lengthscales: vec![ell], scale: s2 }).unwrap();
        GpModel::new(GpKernel::Static { kernel, mean: MeanParams::from_function(&MeanFunction::Constant { value: 0.2 }) }, noise).unwrap()
    };
    let data = GpData::new(Design::Points(x.clone()), y.clone()).unwrap();
    let got = log_marginal_likelihood(&model(noise), &data).unwrap();
    // dense density through an LU determinant and a linear solve
    let cov = DMatrix::from_fn(n, n, |i, j| {
        let r = 3f64.sqrt() * (x[(i, 0)] - x[(j, 0)]).abs() / ell;
        s2 * (1.0 + r) * (-r).exp() + if i == j { noise } else { 0.0 }
    });
    let r = nalgebra::DVector::from_iterator(n, y.iter().map(|v| v - 0.2));
    let lu = cov.clone().lu();
    let quad = r.dot(&lu.solve(&r).unwrap());
    let want = -0.5 * quad - 0.5 * lu.determinant().ln() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    let ml_err = (got - want).abs();
    // interpolation on a jittered grid, where K(X, X) stays well conditioned
    let grid = Matrix::from_fn(n, 1, |i, _| -3.0 + 0.2 * (i as f64 + rng.random_range(0.25..0.75)));
    let on_grid = GpData::new(Design::Points(grid.clone()), y.clone()).unwrap();
    let post = posterior_predict(&model(1e-10), &on_grid, &Design::Points(grid)).unwrap();
    let interp = post.mean.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    verdict(
        ml_err < 1e-8 && interp < 1e-6,
        format!("log-ML error {ml_err:.2e} (limit 1e-8); interpolation error {interp:.2e} at noise 1e-10"),
    )
}

fn c5_gradients() -> Verdict {
    let report = gradient_suite(20, 5).unwrap();
    let (a, b) = (report.worst_log_ml(), report.worst_elbo());
    verdict(a < 1e-4 && b < 1e-3, format!("20 configs: log-ML {a:.2e} (limit 1e-4), ELBO {b:.2e} (limit 1e-3)"))
}

fn c6_elbo_gap() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 100;
    let x = Matrix::column((0..n).map(|i| -3.0 + 6.0 * (i as f64 + rng.random_range(0.2..0.8)) / n as f64).collect());
    let y: Vec<f64> = x.as_slice().iter().map(|v| v.sin() + 0.2 * rng.sample::<f64, _>(StandardNormal)).collect();
    let data = SeriesData::new(x.clone(), y.clone(), 1.0).unwrap();
    let spec = LayerSpec::Static { width: 1, inducing: n, mean: Some(MeanKind::Constant), skip_input: false };
    let mut arch = Architecture::initialize(&[spec], &data, 0).unwrap();
    // pin the inducing inputs to the data and freeze the hyperparameters
    if let dynogp::deep_gp::UnitParams::Static { inducing, .. } = &mut arch.layers[0].units[0].params {
        *inducing = x.clone();
    }
    arch.raw_noise = Matrix::scalar(dynogp::lti_gp::inverse_softplus(0.04));
    let cfg = TrainConfig { iterations: 3000, windows_per_iter: 1, window_size: n, mc_samples: 1, step: 0.01, train_hyperparameters: false, ..Default::default() };
    let (fitted, _) = train_svi(&arch, &data, &cfg).unwrap();
    let full = [Window { start: 0, end: n }];
    let bound = elbo(&fitted, &data, &full, 1, Some(0), 0).unwrap();
    let kernel = StaticParams::new(&Matern32Params { lengthscales: vec![1.0], scale: 1.0 }).unwrap();
    let dynogp::deep_gp::UnitParams::Static { mean, .. } = &fitted.layers[0].units[0].params else { unreachable!() };
    let model = GpModel { kernel: GpKernel::Static { kernel, mean: mean.clone() }, raw_noise: fitted.raw_noise.clone() };
    let log_ml = log_marginal_likelihood(&model, &GpData::new(Design::Points(x), y).unwrap()).unwrap();
    let gap = log_ml - bound;
    verdict(
        gap >= 0.0 && gap <= 0.01 * log_ml.abs(),
        format!("log-ML {log_ml:.4}, ELBO {bound:.4}, gap {gap:.4} (allowed [0, {:.4}])", 0.01 * log_ml.abs()),
    )
}

fn c7_lag_covariances() -> Verdict {
    let delta = 0.05;
    let lambda = -(2f64.ln()) / (20.0 * delta);
    let one = |v: f64| DMatrix::from_element(1, 1, Complex64::new(v, 0.0));
    let sys = ComplexDiagonalLti::new(vec![Complex64::new(lambda, 0.0)], one(0.0), one(1.0), vec![Complex64::new(1.0, 0.0)], vec![0.0], delta).unwrap();
    let n = 200_000;
    let traj = simulate_lti(&realify(&sys), &Matrix::zeros(n, 1), delta, true, InitialState::Stationary, 17).unwrap();
    let y = &traj.outputs;
    let mut parts = Vec::new();
    let mut ok = true;
    for lag in [0usize, 5, 20] {
        let emp = (0..n - lag).map(|t| y[t] * y[t + lag]).sum::<f64>() / (n - lag) as f64;
        let rel = emp / kernel_value(&sys, lag as f64 * delta).unwrap() - 1.0;
        ok &= rel.abs() < 0.05;
        parts.push(format!("lag {lag}: {:+.2}%", 100.0 * rel));
    }
    verdict(ok, format!("{} (limit 5%)", parts.join(", ")))
}

fn wiener_config(arch: Vec<LayerSpec>, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSpec::SyntheticWiener(WienerConfig { seed, ..Default::default() }),
        architecture: arch,
        training: TrainConfig { iterations: 1000, windows_per_iter: 2, window_size: 300, mc_samples: 4, step: 0.03, seed, burn_in: None, ..Default::default() },
        prediction: PredictionConfig { num_samples: 100, observation_noise: true, seed, skip_transient: 150 },
        standardize_inputs: true,
        standardize_output: true,
        output_dir: None,
    }
}

fn c8_wiener_beats_linear() -> Verdict {
    let dynamic = LayerSpec::Dynamic { n_s: 10, n_b: 2, n_l: 1, n_d: 0, width: 1, inducing: 300, skip_input: false };
    let fixed = LayerSpec::Static { width: 1, inducing: 50, mean: None, skip_input: false };
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in 0..5 {
        let ds: TimeSeriesDataset = generate_wiener_dataset(&WienerConfig { seed, ..Default::default() }).unwrap().into();
        let w = train_and_forecast(&wiener_config(vec![dynamic.clone(), fixed.clone()], seed), &ds).unwrap().scores.mae;
        let l = train_and_forecast(&wiener_config(vec![dynamic.clone()], seed), &ds).unwrap().scores.mae;
        wins += usize::from(w < l);
        parts.push(format!("{w:.3}/{l:.3}"));
    }
    verdict(wins >= 4, format!("Wiener wins {wins}/5 (need 4); MAE wiener/linear per seed: {}", parts.join(" ")))
}

fn gaussian_crps(mu: f64, sigma: f64, y: f64) -> f64 {
    let z = (y - mu) / sigma;
    let n = StdNormal::new(0.0, 1.0).unwrap();
    sigma * (z * (2.0 * n.cdf(z) - 1.0) + 2.0 * n.pdf(z) - 1.0 / std::f64::consts::PI.sqrt())
}

fn c9_crps() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for &(mu, sigma, y) in &[(0.0, 1.0, 0.3), (2.0, 0.5, 1.1), (-1.0, 3.0, 4.0)] {
        let d = Normal::new(mu, sigma).unwrap();
        let x: Vec<f64> = (0..10_000).map(|_| d.sample(&mut rng)).collect();
        worst = worst.max((crps_single(&x, y) / gaussian_crps(mu, sigma, y) - 1.0).abs());
    }
    let y: Vec<f64> = (0..50).map(|_| rng.random_range(-2.0..2.0)).collect();
    let point: Vec<f64> = (0..50).map(|_| rng.random_range(-2.0..2.0)).collect();
    let c = crps_from_samples(&Matrix::row(point.clone()), &y).unwrap();
    let m = mae(&y, &point).unwrap();
    verdict(worst < 0.02 && c == m, format!("S=1e4 worst relative error {:.2}% (limit 2%); point CRPS {c} vs MAE {m}", 100.0 * worst))
}

fn c10_ced() -> Verdict {
    let Ok(path) = std::env::var("DYNOGP_CED_CSV") else {
        return Verdict::Skip("set DYNOGP_CED_CSV to the 500-row coupled electric drives CSV to run".into());
    };
    let input = std::env::var("DYNOGP_CED_INPUT").unwrap_or_else(|_| "u".into());
    let output = std::env::var("DYNOGP_CED_OUTPUT").unwrap_or_else(|_| "y".into());
    let scratch = tempfile::tempdir().unwrap();
    let out = std::env::var("DYNOGP_CED_OUT").map(PathBuf::from).unwrap_or_else(|_| scratch.path().to_path_buf());
    let dynamic = LayerSpec::Dynamic { n_s: 10, n_b: 1, n_l: 1, n_d: 0, width: 1, inducing: 250, skip_input: false };
    let cfg = ExperimentConfig {
        dataset: DatasetSpec::Csv {
            path: PathBuf::from(path),
            schema: CsvSchema { time: "time".into(), inputs: vec![input], output },
            train_rows: 400,
            fourier: vec![],
        },
        architecture: vec![dynamic.clone(), LayerSpec::Static { width: 1, inducing: 175, mean: None, skip_input: false }, dynamic],
        training: TrainConfig { iterations: 3000, windows_per_iter: 1, window_size: 400, burn_in: None, ..Default::default() },
        prediction: PredictionConfig::default(),
        standardize_inputs: true,
        standardize_output: true,
        output_dir: Some(out.clone()),
    };
    let outcome = match run_experiment(&cfg) {
        Ok(o) => o,
        Err(e) => return Verdict::Fail(format!("run failed: {e}")),
    };
    let ds = cfg.dataset.load().unwrap();
    let train_mean = ds.y_train().iter().sum::<f64>() / ds.split as f64;
    let baseline = rmse(&ds.y[ds.split..], &vec![train_mean; ds.len() - ds.split]).unwrap();
    let artifacts = ["metrics.json", "predictions.csv", "samples.csv", "trace.csv", "model.json", "config.json"].iter().all(|f| out.join(f).is_file());
    let got = outcome.scores.rmse;
    verdict(artifacts && got < baseline, format!("test RMSE {got:.4} vs training-mean baseline {baseline:.4}; artifacts written: {artifacts}"))
}

fn c11_inducing_law() -> Verdict {
    let n = 1000;
    let times: Vec<f64> = (0..n).map(|i| 0.01 * i as f64).collect();
    let mut counts = vec![0usize; n];
    for seed in 0..200 {
        for i in select_inducing_times(&times, 100, seed).unwrap() {
            counts[i] += 1;
        }
    }
    let deciles: Vec<f64> = counts.chunks(n / 10).map(|c| c.iter().sum::<usize>() as f64 / (200 * c.len()) as f64).collect();
    let monotone = deciles.windows(2).all(|w| w[1] >= w[0]);
    let shown: Vec<String> = deciles.iter().map(|d| format!("{d:.3}")).collect();
    verdict(monotone, format!("decile inclusion rates {}", shown.join(" ")))
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, Duration, fn() -> Verdict); 11] = [
        (1, "Matern-3/2 equivalence", Duration::from_secs(1), c1_matern_equivalence),
        (2, "closed form vs dense oracle", Duration::from_secs(10), c2_closed_form_vs_dense),
        (3, "block Lyapunov residual", Duration::from_secs(1), c3_lyapunov_residual),
        (4, "exact GP log-ML and interpolation", Duration::from_secs(1), c4_exact_gp),
        (5, "gradient suite", Duration::from_secs(30), c5_gradients),
        (6, "ELBO bound with m = n", Duration::from_secs(60), c6_elbo_gap),
        (7, "simulator lag covariances", Duration::from_secs(30), c7_lag_covariances),
        (8, "Wiener beats linear", Duration::from_secs(15 * 60), c8_wiener_beats_linear),
        (9, "CRPS", Duration::from_secs(5), c9_crps),
        (10, "CED run beats the mean baseline", Duration::from_secs(30 * 60), c10_ced),
        (11, "inducing-time sampling law", Duration::from_secs(10), c11_inducing_law),
    ];
    let only: Option<Vec<u32>> = std::env::var("DYNOGP_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, budget, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let clock = Instant::now();
        let v = run();
        let secs = clock.elapsed().as_secs_f64();
        let timing = format!("{secs:.2}s of {}s", budget.as_secs());
        let over = clock.elapsed() > budget;
        match v {
            Verdict::Pass(d) if !over => println!("criterion {id:>2} PASS  {name}: {d} [{timing}]"),
            Verdict::Pass(d) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: over time budget; {d} [{timing}]");
            }
            Verdict::Fail(d) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {d} [{timing}]");
            }
            Verdict::Skip(d) => println!("criterion {id:>2} SKIP  {name}: {d}"),
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
