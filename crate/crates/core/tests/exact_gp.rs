use std::rc::Rc;

use dynogp::diffnum::Matrix;
use dynogp::exact_gp::{
    fit_map, log_marginal_likelihood, log_marginal_likelihood_grad, map_objective, posterior_predict, Design, GpData, GpKernel, GpModel,
    MapConfig,
};
use dynogp::lti_gp::{kernel_value, mean_trajectory, LtiParams, LtiSignature};
use dynogp::static_gp::{MeanFunction, MeanParams, StaticParams, Matern32Params};
use dynogp::Error;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn matern(r: f64, ell: f64, s2: f64) -> f64 {
    let a = 3f64.sqrt() * r / ell;
    s2 * (1.0 + a) * (-a).exp()
}

// log N(y; m, S) through LU determinant and explicit inverse.
fn dense_log_density(y: &[f64], m: &[f64], s: &DMatrix<f64>) -> f64 {
    let n = y.len();
    let r = nalgebra::DVector::from_iterator(n, y.iter().zip(m).map(|(a, b)| a - b));
    let inv = s.clone().try_inverse().unwrap();
    let quad = (r.transpose() * inv * &r)[(0, 0)];
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + s.determinant().ln() + quad)
}

fn static_model(ells: &[f64], s2: f64, mean: MeanFunction, noise: f64) -> GpModel {
    let kernel = StaticParams::new(&Matern32Params { lengthscales: ells.to_vec(), scale: s2 }).unwrap();
    GpModel::new(GpKernel::Static { kernel, mean: MeanParams::from_function(&mean) }, noise).unwrap()
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
    Matrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0))
}

#[test]
fn static_log_ml_matches_dense_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, ells, s2, noise) = (30, [0.7, 1.6], 1.3, 0.2);
    let x = random_points(&mut rng, n, 2);
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..2.0)).collect();
    let mean = MeanFunction::Linear { weights: vec![0.4, -0.3], bias: 0.25 };
    let model = static_model(&ells, s2, mean, noise);
    let data = GpData::new(Design::Points(x.clone()), y.clone()).unwrap();

    let cov = DMatrix::from_fn(n, n, |i, j| {
        let r = (0..2).map(|k| ((x[(i, k)] - x[(j, k)]) / ells[k]).powi(2)).sum::<f64>().sqrt();
        matern(r, 1.0, s2) + if i == j { noise } else { 0.0 }
    });
    let m: Vec<f64> = (0..n).map(|i| 0.4 * x[(i, 0)] - 0.3 * x[(i, 1)] + 0.25).collect();
    let expected = dense_log_density(&y, &m, &cov);
    let got = log_marginal_likelihood(&model, &data).unwrap();
    assert!((got - expected).abs() < 1e-8, "{got} vs {expected}");
}

#[test]
fn dynamic_log_ml_matches_dense_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let delta = 0.05;
    let sig = LtiSignature { num_blocks: 3, num_inputs: 2, num_noise: 2, has_b: true, has_d: true };
    let mut lti = LtiParams::init(sig, delta, &mut rng).unwrap();
    lti.d = Matrix::row(vec![0.3, -0.2]);
    let sys = lti.to_system().unwrap();
    let grid = 80;
    let u = Matrix::from_fn(grid, 2, |k, j| ((k as f64) * delta * (3.0 + 2.0 * j as f64)).sin());
    let index: Vec<usize> = (0..30).map(|i| 2 * i + (i % 3)).collect();
    let y: Vec<f64> = index.iter().map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let noise = 0.3;
    let model = GpModel::new(GpKernel::Dynamic(lti), noise).unwrap();
    let data = GpData::new(Design::Grid { inputs: Rc::new(u.clone()), index: index.clone() }, y.clone()).unwrap();

    let full_mean = mean_trajectory(&sys, &u).unwrap();
    let m: Vec<f64> = index.iter().map(|&k| full_mean[k]).collect();
    let cov = DMatrix::from_fn(30, 30, |i, j| {
        let tau = (index[i] as f64 - index[j] as f64).abs() * delta;
        kernel_value(&sys, tau).unwrap() + if i == j { noise } else { 0.0 }
    });
    let expected = dense_log_density(&y, &m, &cov);
    let got = log_marginal_likelihood(&model, &data).unwrap();
    assert!((got - expected).abs() < 1e-8, "{got} vs {expected}");
}

#[test]
fn two_points_identity_kernel_limit() {
    // Far-apart points with a tiny lengthscale give K = I.
    let model = static_model(&[1e-3], 1.0, MeanFunction::Zero, 1e-9);
    let data = GpData::new(Design::Points(Matrix::column(vec![0.0, 100.0])), vec![0.0, 0.0]).unwrap();
    let got = log_marginal_likelihood(&model, &data).unwrap();
    assert!((got + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-6);
}

#[test]
fn posterior_interpolates_training_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_points(&mut rng, 15, 1);
    let y: Vec<f64> = x.as_slice().iter().map(|v| (2.0 * v).sin() + 0.5).collect();
    let model = static_model(&[0.8], 1.0, MeanFunction::Constant { value: 0.3 }, 1e-10);
    let train = GpData::new(Design::Points(x.clone()), y.clone()).unwrap();
    let post = posterior_predict(&model, &train, &Design::Points(x)).unwrap();
    for (m, t) in post.mean.iter().zip(&y) {
        assert!((m - t).abs() < 1e-6, "{m} vs {t}");
    }
    assert!(post.variance().iter().all(|&v| v < 1e-6));
}

#[test]
fn posterior_variance_bounded_by_prior_and_shrinks_with_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_points(&mut rng, 50, 1);
    let y: Vec<f64> = x.as_slice().iter().map(|v| v.cos()).collect();
    let test = Design::Points(Matrix::column((0..40).map(|i| -2.5 + 0.125 * i as f64).collect()));
    let model = static_model(&[0.5], 1.7, MeanFunction::Zero, 0.05);
    let mut previous = vec![1.7; 40];
    for n in [5, 10, 20, 35, 50] {
        let sub = Matrix::from_fn(n, 1, |i, _| x[(i, 0)]);
        let train = GpData::new(Design::Points(sub), y[..n].to_vec()).unwrap();
        let var = posterior_predict(&model, &train, &test).unwrap().variance();
        for (v, p) in var.iter().zip(&previous) {
            assert!(*v <= p + 1e-10, "variance rose from {p} to {v} at n={n}");
        }
        previous = var;
    }
}

#[test]
fn log_ml_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_points(&mut rng, 20, 2);
    let y: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
    let data = GpData::new(Design::Points(x), y).unwrap();
    let model = static_model(&[0.9, 1.4], 0.8, MeanFunction::Linear { weights: vec![0.1, 0.2], bias: -0.1 }, 0.1);
    let (_, grads) = log_marginal_likelihood_grad(&model, &data).unwrap();
    let h = 1e-5;
    for (p, g) in grads.iter().enumerate() {
        for k in 0..g.len() {
            let eval = |shift: f64| {
                let mut m = model.clone();
                m.tensors_mut()[p].1.as_mut_slice()[k] += shift;
                log_marginal_likelihood(&m, &data).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = g.as_slice()[k];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1.0) < 1e-4, "tensor {p}[{k}]: {a} vs {fd}");
        }
    }
}

#[test]
fn uniform_prior_objective_is_log_ml() {
    let data = GpData::new(Design::Points(Matrix::column(vec![0.0, 0.4, 1.1])), vec![0.2, -0.1, 0.5]).unwrap();
    let model = static_model(&[0.6], 1.0, MeanFunction::Zero, 0.1);
    let cfg = MapConfig { horseshoe_scale: None, ..Default::default() };
    assert_eq!(map_objective(&model, &data, &cfg).unwrap(), log_marginal_likelihood(&model, &data).unwrap());
}

#[test]
fn init_error_names_the_parameter() {
    let data = GpData::new(Design::Points(Matrix::column(vec![0.0, 1.0])), vec![0.0, 1.0]).unwrap();
    let mut model = static_model(&[0.6], 1.0, MeanFunction::Zero, 0.1);
    model.tensors_mut()[0].1.as_mut_slice()[0] = f64::NAN;
    let name = model.tensors()[0].0.to_string();
    match fit_map(&model, &data, &MapConfig { iterations: 5, ..Default::default() }) {
        Err(Error::Init { param }) => assert_eq!(param, name),
        other => panic!("expected an init error, got {other:?}"),
    }
}

#[test]
fn map_recovers_lengthscale() {
    let n = 200;
    let mut log_ratio = 0.0;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..20.0)).collect();
        let cov = DMatrix::from_fn(n, n, |i, j| matern((x[i] - x[j]).abs(), 1.0, 1.0) + if i == j { 1e-2 } else { 0.0 });
        let chol = cov.cholesky().unwrap();
        let z = nalgebra::DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y: Vec<f64> = (chol.l() * z).iter().copied().collect();
        let data = GpData::new(Design::Points(Matrix::column(x)), y).unwrap();
        let init = static_model(&[0.3], 0.5, MeanFunction::Zero, 0.1);
        let (fitted, trace) = fit_map(&init, &data, &MapConfig { iterations: 400, step: 0.05, horseshoe_scale: None }).unwrap();
        assert!(trace.best.last().unwrap() >= &trace.objective[0]);
        let GpKernel::Static { kernel, .. } = &fitted.kernel else { unreachable!() };
        log_ratio += kernel.params().lengthscales[0].ln() / 5.0;
    }
    let ell = log_ratio.exp();
    assert!((0.5..2.0).contains(&ell), "recovered lengthscale {ell}");
}

/// Exact GP with a dynamic kernel on a 5-block linear system: MAP on a
/// thinned training grid, then the posterior given all 1000 training rows.
#[test]
fn linear_system_forecast_beats_twice_the_noise() {
    use dynogp::simulator::{generate_wiener_dataset, Nonlinearity, TrueSystem, WienerConfig};
    let cfg = WienerConfig {
        system: TrueSystem::ComplexBlocks { num_blocks: 5 },
        nonlinearity: Nonlinearity::Identity,
        t_end: 15.0,
        t_split: 10.0,
        seed: 2,
        ..Default::default()
    };
    let ds = generate_wiener_dataset(&cfg).unwrap();
    let n = ds.split;
    let mu = ds.y_train().iter().sum::<f64>() / n as f64;
    let sd = (ds.y_train().iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64).sqrt();
    let scaled = |idx: &[usize]| idx.iter().map(|&i| (ds.y[i] - mu) / sd).collect::<Vec<_>>();
    let u = Rc::new(ds.inputs.clone());
    let thin: Vec<usize> = (0..n).step_by(4).collect();
    let sig = LtiSignature { num_blocks: 10, num_inputs: 2, num_noise: 1, has_b: true, has_d: false };
    let lti = LtiParams::init(sig, ds.delta, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let init = GpModel::new(GpKernel::Dynamic(lti), 0.05).unwrap();
    let subset = GpData::new(Design::Grid { inputs: u.clone(), index: thin.clone() }, scaled(&thin)).unwrap();
    let (fitted, _) = fit_map(&init, &subset, &MapConfig { iterations: 1000, step: 0.03, horseshoe_scale: Some(0.1) }).unwrap();
    let all: Vec<usize> = (0..n).collect();
    let train = GpData::new(Design::Grid { inputs: u.clone(), index: all.clone() }, scaled(&all)).unwrap();
    let test: Vec<usize> = (n + 150..ds.y.len()).collect();
    let post = posterior_predict(&fitted, &train, &Design::Grid { inputs: u, index: test.clone() }).unwrap();
    let err = test.iter().enumerate().map(|(k, &i)| (post.mean[k] * sd + mu - ds.y[i]).powi(2)).sum::<f64>() / test.len() as f64;
    let rmse = err.sqrt();
    assert!(rmse < 2.0 * ds.noise_std, "rmse {rmse} vs noise {}", ds.noise_std);
}
