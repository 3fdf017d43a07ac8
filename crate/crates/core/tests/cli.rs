use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use edgesense::config::{default_config_json, load_config};
use edgesense::telemetry::{emit_log, parse_log};

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn edgesense(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgesense")).args(args).current_dir(dir).output().expect("binary runs")
}

fn default_config_path() -> String {
    repo_root().join("configs/default.json").display().to_string()
}

/// Small enough to train and evaluate in a few seconds.
const TINY: &str = r#"{
  "seed": 11,
  "train": {"epochs": 2},
  "train_flights": 12,
  "test_flights": 3,
  "heights": [0.04],
  "angles": [0]
}"#;

#[test]
fn shipped_configs_match_defaults() {
    let text = std::fs::read_to_string(repo_root().join("configs/default.json")).unwrap();
    assert_eq!(text, default_config_json());
    let acceptance = load_config(&repo_root().join("configs/acceptance.json")).unwrap();
    assert_eq!(acceptance.train.epochs, 10);
}

#[test]
fn usage_and_config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(edgesense(&["frobnicate"], dir.path()).status.code(), Some(2));
    std::fs::write(dir.path().join("bad.json"), r#"{"max_match": -1}"#).unwrap();
    let out = edgesense(&["simulate", "--config", "bad.json", "--out", "x.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("max_match"));
    let missing = edgesense(&["simulate", "--config", "nope.json", "--out", "x.csv"], dir.path());
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("log.csv"), "not,a,log\n").unwrap();
    let cfg = default_config_path();
    let out = edgesense(&["features", "--config", &cfg, "--input", "log.csv", "--out", "f.csv"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn simulated_log_round_trips_and_features_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = default_config_path();
    let out = edgesense(&["simulate", "--config", &cfg, "--seed", "5", "--out", "flight.csv", "--edge-x", "2.0"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let bytes = std::fs::read(dir.path().join("flight.csv")).unwrap();
    let record = parse_log(&bytes).unwrap();
    assert_eq!(record.ground_truth.len(), 1);
    assert_eq!(emit_log(&record).unwrap(), bytes);

    let out = edgesense(
        &["features", "--config", &cfg, "--input", "flight.csv", "--out", "feat.csv", "--disturbance", "dist.csv"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let features = std::fs::read_to_string(dir.path().join("feat.csv")).unwrap();
    assert!(features.lines().count() > 100);
    assert!(dir.path().join("dist.csv").exists());
}

#[test]
fn train_detect_compress_eval_on_a_tiny_run() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    let run = |args: &[&str]| {
        let out = edgesense(args, dir.path());
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };

    run(&["train", "--config", "tiny.json", "--out", "model.json", "--history", "history.json"]);
    let history: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("history.json")).unwrap()).unwrap();
    assert!(history.to_string().contains("accuracy"));

    run(&["compress", "--config", "tiny.json", "--model", "model.json", "--out", "compact.json", "--report", "size.json"]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("size.json")).unwrap()).unwrap();
    assert_eq!(report["bits"], 8);

    run(&["simulate", "--config", "tiny.json", "--out", "flight.csv"]);
    for model in ["model.json", "compact.json"] {
        let out = run(&["detect", "--config", "tiny.json", "--model", model, "--input", "flight.csv"]);
        let det: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert!(det["edges"].is_array());
        assert_eq!(det["ground_truth"].as_array().unwrap().len(), 1);
    }

    run(&["eval", "--config", "tiny.json", "--out-dir", "a", "--model", "model.json"]);
    run(&["eval", "--config", "tiny.json", "--out-dir", "b", "--model", "model.json"]);
    for file in ["summary.json", "flights.csv", "error_vs_height.csv", "error_vs_angle.csv", "error_cdf.csv"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}
