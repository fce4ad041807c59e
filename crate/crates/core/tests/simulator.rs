use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dynogp::diffnum::Matrix;
use dynogp::lti_gp::{dense_mean_trajectory, kernel_value, mean_trajectory, realify, ComplexDiagonalLti};
use dynogp::simulator::*;

fn random_inputs(n: usize, nu: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(n, nu, |_, _| rng.random_range(-1.0..1.0))
}

#[test]
fn noise_free_run_equals_the_closed_form_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..10 {
        let delta = 0.05;
        let cs = random_complex_system(1 + trial % 4, 2, delta, &mut rng).unwrap();
        let u = random_inputs(300, 2, trial as u64);
        let sim = simulate_lti(&realify(&cs), &u, delta, false, InitialState::Mean, 5).unwrap();
        let closed = mean_trajectory(&cs, &u).unwrap();
        let worst = sim.outputs.iter().zip(&closed).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-10, "trial {trial}: {worst:e}");
    }
}

#[test]
fn noise_free_rank_one_run_equals_dense_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sys = random_rank_one_system(5, 2, &mut rng).unwrap();
    let u = random_inputs(400, 2, 9);
    let sim = simulate_lti(&sys, &u, 0.01, false, InitialState::Mean, 0).unwrap();
    let dense = dense_mean_trajectory(&sys, &u, 0.01).unwrap();
    let worst = sim.outputs.iter().zip(&dense).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-10, "{worst:e}");
}

#[test]
fn rank_one_transitions_are_hurwitz() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let sys = random_rank_one_system(5, 2, &mut rng).unwrap();
        let eig = SymmetricEigen::new(sys.a.clone()).eigenvalues;
        assert!(eig.iter().all(|&e| e < 0.0), "{eig:?}");
    }
}

#[test]
fn dataset_layout() {
    let ds = generate_wiener_dataset(&WienerConfig::default()).unwrap();
    assert_eq!(ds.times.len(), 2500);
    assert_eq!(ds.split, 1500);
    assert_eq!(ds.y_train().len(), 1500);
    assert_eq!(ds.y_test().len(), 1000);
    assert_eq!(ds.inputs.shape(), [2500, 2]);
    assert!((ds.times[1] - 0.01).abs() < 1e-15);
    // test outputs carry no measurement noise
    assert_eq!(&ds.y[1500..], &ds.y_clean[1500..]);
    assert!(ds.y_clean.iter().all(|&v| v >= 0.0));
    let resid: Vec<f64> = ds.y[..1500].iter().zip(&ds.y_clean).map(|(a, b)| a - b).collect();
    let sd = (resid.iter().map(|r| r * r).sum::<f64>() / 1500.0).sqrt();
    assert!((sd / ds.noise_std - 1.0).abs() < 0.1, "{sd} vs {}", ds.noise_std);
}

#[test]
fn dataset_is_deterministic_under_seed() {
    let cfg = WienerConfig { seed: 4, ..Default::default() };
    let a = generate_wiener_dataset(&cfg).unwrap();
    let b = generate_wiener_dataset(&cfg).unwrap();
    assert_eq!(a, b);
    let c = generate_wiener_dataset(&WienerConfig { seed: 5, ..Default::default() }).unwrap();
    assert_ne!(a.y, c.y);
}

#[test]
fn quadratic_option_squares_the_clean_output() {
    let lin = generate_wiener_dataset(&WienerConfig { nonlinearity: Nonlinearity::Identity, ..Default::default() }).unwrap();
    let sq = generate_wiener_dataset(&WienerConfig { nonlinearity: Nonlinearity::Quadratic, ..Default::default() }).unwrap();
    for (a, b) in lin.y_clean.iter().zip(&sq.y_clean) {
        assert!((a * a - b).abs() < 1e-12);
    }
}

/// One real mode with `ρ = e^{λδ}` and `ρ²⁰ = ½`.
fn slow_real_mode(delta: f64) -> ComplexDiagonalLti {
    let lambda = -(2f64.ln()) / (20.0 * delta);
    ComplexDiagonalLti::new(
        vec![Complex64::new(lambda, 0.0)],
        DMatrix::from_element(1, 1, Complex64::new(0.0, 0.0)),
        DMatrix::from_element(1, 1, Complex64::new(1.0, 0.0)),
        vec![Complex64::new(1.0, 0.0)],
        vec![0.0],
        delta,
    )
    .unwrap()
}

#[test]
fn stationary_lag_covariances_match_the_kernel() {
    let delta = 0.05;
    let cs = slow_real_mode(delta);
    let n = 200_000;
    let traj = simulate_lti(&realify(&cs), &Matrix::zeros(n, 1), delta, true, InitialState::Stationary, 17).unwrap();
    let y = &traj.outputs;
    for lag in [0usize, 5, 20] {
        let emp = (0..n - lag).map(|t| y[t] * y[t + lag]).sum::<f64>() / (n - lag) as f64;
        let exact = kernel_value(&cs, lag as f64 * delta).unwrap();
        assert!((emp / exact - 1.0).abs() < 0.05, "lag {lag}: {emp} vs {exact}");
    }
}

#[test]
fn csv_export_has_one_row_per_sample() {
    let ds = generate_wiener_dataset(&WienerConfig { t_end: 1.0, t_split: 0.5, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wiener.csv");
    ds.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("time,u1,u2,y"));
    assert_eq!(lines.count(), 100);
}
