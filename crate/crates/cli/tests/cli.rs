use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn conjtta(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conjtta"))
        .args(args)
        .current_dir(dir)
        .env_remove("CONJTTA_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

const SMALL: &str = r#"{"data": {"shift": {"dim": 10}, "n_train_per_class": 100, "n_val_per_class": 50, "n_test_per_class": 200},
                        "train": {"lr": 0.05, "epochs": 10, "batch_size": 32}}"#;

#[test]
fn unknown_key_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"tta": {"temprature": 2.0}}"#);
    let out = conjtta(&["adapt", "--config", &cfg, "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("temprature"));
}

#[test]
fn no_op_adaptation_matches_source_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", SMALL);
    let a = dir.path().join("a");
    let out = conjtta(&["train-source", "--config", &cfg, "--out", "a"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let test_error = report(&a)["results"]["test_error"].as_f64().unwrap();

    let none = write(dir.path(), "n.json", &SMALL.replacen('{', r#"{"tta": {"method": "none"},"#, 1));
    let out = conjtta(&["adapt", "--config", &none, "--out", "b", "--model", "a/model.json"], dir.path());
    assert!(out.status.success());
    let r = report(&dir.path().join("b"));
    assert_eq!(r["results"]["mean_online_error"].as_f64().unwrap(), test_error);
    assert_eq!(r["config"]["tta"]["batch_size"], 200);
    assert!(r["files"].as_array().unwrap().iter().any(|f| f == "trajectory.csv"));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        &SMALL.replacen('{', r#"{"loss": {"kind": "squared"}, "tta": {"method": "conjugate_pl", "lr": 1e300},"#, 1),
    );
    let out = conjtta(&["adapt", "--config", &cfg, "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch"));
}

#[test]
fn missing_config_file_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = conjtta(&["adapt", "--config", "nope.json", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn reruns_produce_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", SMALL);
    let mut results = Vec::new();
    for o in ["r1", "r2"] {
        assert!(conjtta(&["adapt", "--config", &cfg, "--out", o, "--seed", "3"], dir.path()).status.success());
        let mut r = report(&dir.path().join(o));
        r.as_object_mut().unwrap().remove("wall_clock_seconds");
        results.push(r);
    }
    assert_eq!(results[0], results[1]);
    assert_eq!(results[0]["config"]["seed"], 3);
    assert_eq!(results[0]["config"]["tta"]["seed"], 3);
}

#[test]
fn environment_sets_default_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_conjtta"))
        .args(["slice"])
        .current_dir(dir.path())
        .env("CONJTTA_OUT_DIR", "from_env")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("from_env/slice.csv").exists());
}

#[test]
fn grid_writes_table_and_echoes_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", SMALL);
    assert!(conjtta(&["grid", "--config", &cfg, "--out", "g"], dir.path()).status.success());
    let table = std::fs::read_to_string(dir.path().join("g/grid.csv")).unwrap();
    assert_eq!(table.lines().count(), 10);
    let r = report(&dir.path().join("g"));
    assert_eq!(r["config"]["data"]["shift"]["d_range"], serde_json::json!([0.5, 2.0]));
    assert_eq!(r["config"]["meta"]["experiment"]["meta"]["fd_step"], 1e-3);
}

#[test]
fn reproduce_a1_writes_summary_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"toy": {"dim": 10, "n_train_per_class": 100, "n_test_per_class": 200}}"#);
    let out = conjtta(&["reproduce-a1", "--config", &cfg, "--out", "a1", "--seeds", "0,1"], dir.path());
    assert!(out.status.success());
    let summary = std::fs::read_to_string(dir.path().join("a1/a1_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 13);
    assert!(dir.path().join("a1/curves/lambda_0.7_conjugate_pl.csv").exists());
}

#[test]
fn check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = conjtta(&["check", "--out", "c"], dir.path());
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().all(|l| l.starts_with("PASS")));
}
