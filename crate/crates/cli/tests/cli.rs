use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dynogp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynogp")).args(args).current_dir(dir).env("RUST_LOG", "warn").output().unwrap()
}

fn scores(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let none = dynogp(&[], dir.path());
    assert_eq!(none.status.code(), Some(1));
    let bad = dynogp(&["simulate", "--bogus"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("Usage"));
    assert_eq!(dynogp(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dynogp(&["fit", "--config", "missing.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn simulate_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.csv", "b.csv"] {
        let out = dynogp(&["simulate", "--seed", "7", "--t-end", "2", "--t-split", "1", "--out", name], dir.path());
        assert_eq!(out.status.code(), Some(0));
    }
    let a = fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.csv")).unwrap());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 201);
}

#[test]
fn point_predictions_score_crps_as_mae() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("p.csv"), "time,mean\n0,1\n1,2\n2,4\n").unwrap();
    fs::write(dir.path().join("t.csv"), "time,y\n0,1.5\n1,2\n2,3\n").unwrap();
    let out = dynogp(&["evaluate", "--pred", "p.csv", "--truth", "t.csv"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let s = scores(&out);
    assert_eq!(s["crps"], s["mae"]);
    assert!((s["mae"].as_f64().unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn fit_then_predict() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{
        "dataset": {"kind": "synthetic_wiener", "t_end": 3.0, "t_split": 2.0, "delta": 0.02, "seed": 1},
        "architecture": [
            {"kind": "dynamic", "n_s": 4, "n_b": 2, "n_l": 1, "n_d": 0, "inducing": 20},
            {"kind": "static", "inducing": 8}
        ],
        "training": {"iterations": 10, "windows_per_iter": 1, "window_size": 50, "mc_samples": 2},
        "prediction": {"num_samples": 20},
        "output_dir": "run"
    }"#;
    fs::write(dir.path().join("cfg.json"), cfg).unwrap();
    let fit = dynogp(&["fit", "--config", "cfg.json"], dir.path());
    assert_eq!(fit.status.code(), Some(0), "{}", String::from_utf8_lossy(&fit.stderr));
    assert!(scores(&fit)["crps"].as_f64().unwrap().is_finite());
    for name in ["metrics.json", "predictions.csv", "trace.csv", "model.json", "config.json"] {
        assert!(dir.path().join("run").join(name).is_file(), "{name}");
    }
    let pred = dynogp(&["predict", "--model", "run/model.json", "--out", "p.csv", "--samples", "10"], dir.path());
    assert_eq!(pred.status.code(), Some(0), "{}", String::from_utf8_lossy(&pred.stderr));
    assert_eq!(fs::read_to_string(dir.path().join("p.csv")).unwrap().lines().count(), 51);
}

#[test]
fn gradcheck_passes_on_a_small_suite() {
    let dir = tempfile::tempdir().unwrap();
    let out = dynogp(&["gradcheck", "--configs", "2", "--seed", "3"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
}
