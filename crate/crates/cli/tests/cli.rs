use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
    "cohort": {"n_admissions": 40},
    "fqi": {
        "batch_size": 2000,
        "q_trees": {"n_trees": 5},
        "consistency_trees": {"n_trees": 5},
        "policy_trees": {"n_trees": 5}
    },
    "eval": {"behaviour_trees": {"n_trees": 5}, "random_trials": 2}
}"#;

fn labpolicy(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("config.json");
    if !config.exists() {
        std::fs::write(&config, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_labpolicy"))
        .args(args)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("out"))
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = labpolicy(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn run_to_policy(dir: &Path, iterations: &str) {
    ok(dir, &["simulate", "--seed", "3"]);
    ok(dir, &["forecast", "--seed", "3"]);
    ok(dir, &["build-transitions", "--seed", "3"]);
    ok(dir, &["train", "--seed", "3", "--iterations", iterations]);
}

#[test]
fn simulate_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(a.path(), &["simulate", "--seed", "11"]);
    ok(b.path(), &["simulate", "--seed", "11"]);
    for file in ["events.csv", "cohort_summary.json"] {
        let x = std::fs::read(a.path().join("out").join(file)).unwrap();
        let y = std::fs::read(b.path().join("out").join(file)).unwrap();
        assert!(x == y, "{file} differs between runs");
    }
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_labpolicy"))
        .args(["simulate", "--config"])
        .arg(dir.path().join("absent.json"))
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.json"), r#"{"fqi": {"gamma": 1.5}}"#).unwrap();
    assert_eq!(labpolicy(dir.path(), &["simulate"]).status.code(), Some(2));
}

#[test]
fn stage_without_inputs_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = labpolicy(dir.path(), &["forecast"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("events.csv"));
}

#[test]
fn train_logs_one_row_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    run_to_policy(dir.path(), "5");
    let log = std::fs::read_to_string(dir.path().join("out/fqi_metrics.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 6);
    let header: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(header["gamma"], 0.9);
    assert_eq!(header["iterations"], 5);
    for (k, line) in lines[1..].iter().enumerate() {
        let row: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(row["iteration"], k + 1);
    }
}

#[test]
fn evaluate_rejects_artifacts_from_other_inputs() {
    let dir = tempfile::tempdir().unwrap();
    run_to_policy(dir.path(), "2");
    ok(dir.path(), &["evaluate", "--seed", "3"]);
    let report = labpolicy(dir.path(), &["report"]);
    assert!(report.status.success());
    assert!(String::from_utf8_lossy(&report.stdout).contains("MO-FQI"));

    // a different cohort under the same output directory breaks the chain
    ok(dir.path(), &["simulate", "--seed", "4"]);
    assert_eq!(labpolicy(dir.path(), &["evaluate", "--seed", "3"]).status.code(), Some(4));
}
