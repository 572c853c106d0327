use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn ktbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ktbench"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ktbench(args);
    assert!(
        out.status.success(),
        "ktbench {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny DKT config so that five-fold training takes seconds.
fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("config.json");
    let text = format!(
        r#"{{
            "model": {{"arch": "dkt", "emb_size": 8, "hidden_size": 8}},
            "train": {{"max_epochs": 3, "patience": 2, "batch_size": 32, "learning_rate": 0.005}},
            "sweep": {{"space": {{"learning_rate": [0.005, 0.001], "dropout": [0.1], "seed": [1], "emb_size": [8]}}}}
            {extra}
        }}"#
    );
    std::fs::write(&path, text).unwrap();
    path
}

/// Simulates and preprocesses a small dataset; returns the output directory.
fn prepared(dir: &Path, kcs_max: &str) -> PathBuf {
    let sim = dir.join("sim");
    ok(&[
        "simulate", "--out", s(&sim), "--students", "60", "--questions", "20", "--kcs", "5",
        "--kcs-max", kcs_max, "--steps", "20", "--seed", "3",
    ]);
    let out = dir.join("out");
    ok(&["preprocess", s(&sim.join("sim.csv")), "--out", s(&out)]);
    out
}

#[test]
fn unknown_subcommand_or_flag_exits_2() {
    assert_eq!(ktbench(&["bogus"]).status.code(), Some(2));
    assert_eq!(ktbench(&["--no-such-flag", "train"]).status.code(), Some(2));
    assert_eq!(ktbench(&[]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = ktbench(&["--out", s(&dir.path().join("empty")), "train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no dataset"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"bogus": 1}}"#).unwrap();
    assert_eq!(ktbench(&["--config", s(&bad), "--print-config"]).status.code(), Some(1));
    assert_eq!(ktbench(&["--model", "dkvmn", "--print-config"]).status.code(), Some(1));
}

#[test]
fn print_config_round_trips_and_applies_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let first = ok(&[
        "--print-config", "--seed", "7", "--model", "sakt", "--fusion", "lf-mv",
        "--observed-pct", "0.3,0.6", "--mode", "accumulative", "--cutoff", "50",
    ]);
    let v: Value = serde_json::from_str(&first).unwrap();
    assert_eq!(v["split_seed"], 7);
    assert_eq!(v["train"]["seed"], 7);
    assert_eq!(v["sweep"]["seed"], 7);
    assert_eq!(v["model"]["arch"], "sakt");
    assert_eq!(v["protocol"]["fusion"], "lf-mv");
    assert_eq!(v["protocol"]["length_cutoff"], 50);
    assert_eq!(v["protocol"]["observed_pcts"], serde_json::json!([0.3, 0.6]));

    let path = dir.path().join("printed.json");
    std::fs::write(&path, &first).unwrap();
    assert_eq!(ok(&["--config", s(&path), "--print-config"]), first);
}

#[test]
fn simulate_and_preprocess_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = prepared(dir.path(), "2");
    let sidecar: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("sim/sim.sim.json")).unwrap()).unwrap();
    assert_eq!(sidecar["config"]["n_students"], 60);
    assert_eq!(sidecar["probabilities"].as_array().unwrap().len(), 60);

    let split: Value = serde_json::from_str(&std::fs::read_to_string(out.join("split.json")).unwrap()).unwrap();
    assert_eq!(split["test_ids"].as_array().unwrap().len(), 12);
    let folds = split["folds"].as_array().unwrap();
    assert_eq!(folds.len(), 5);
    assert_eq!(folds.iter().map(|f| f.as_array().unwrap().len()).sum::<usize>(), 48);

    let stats: Value = serde_json::from_str(&std::fs::read_to_string(out.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["filtered"]["interactions"], 1200);
    let csv = std::fs::read_to_string(out.join("dataset.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1201);
}

#[test]
fn single_kc_dataset_has_no_leakage_gain() {
    let dir = tempfile::tempdir().unwrap();
    let out = prepared(dir.path(), "1");
    let cfg = tiny_config(dir.path(), "");
    let stdout = ok(&[
        "--config", s(&cfg), "--out", s(&out), "--data", s(&out.join("dataset.csv")),
        "audit-leakage", "--models", "dkt",
    ]);
    assert!(stdout.contains("gain 0.0000"), "{stdout}");
    let audits: Value = serde_json::from_str(&std::fs::read_to_string(out.join("leakage.json")).unwrap()).unwrap();
    assert_eq!(audits[0]["gain"].as_f64().unwrap(), 0.0);
}

#[test]
fn sweep_with_budget_one_writes_one_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let out = prepared(dir.path(), "2");
    let cfg = tiny_config(dir.path(), "");
    let sweep_out = dir.path().join("sweep");
    ok(&[
        "--config", s(&cfg), "--out", s(&sweep_out), "--data", s(&out.join("dataset.csv")),
        "sweep", "--budget", "1",
    ]);
    let runs: Vec<_> = std::fs::read_dir(sweep_out.join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 1);
    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(sweep_out.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(summary["trials"].as_array().unwrap().len(), 1);
    assert_eq!(summary["requested_budget"], 1);
}

#[test]
fn train_evaluate_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = prepared(dir.path(), "2");
    let cfg = tiny_config(dir.path(), r#", "protocol": {"observed_pcts": [0.5]}"#);
    let common = ["--config", s(&cfg), "--out", s(&out)];
    let with = |extra: &[&str]| -> String {
        let mut args = common.to_vec();
        args.extend_from_slice(extra);
        ok(&args)
    };

    with(&["train"]);
    let runs = out.join("runs");
    let ledger_path = std::fs::read_dir(&runs).unwrap().next().unwrap().unwrap().path();
    let hash = ledger_path.file_stem().unwrap().to_str().unwrap().to_string();
    for fold in 0..5 {
        assert!(out.join(format!("checkpoints/{hash}/fold{fold}.json")).exists());
    }

    // Evaluation restores the checkpoints instead of retraining.
    let before: Value = serde_json::from_str(&std::fs::read_to_string(&ledger_path).unwrap()).unwrap();
    with(&["evaluate", "--predictions"]);
    let ledger: Value = serde_json::from_str(&std::fs::read_to_string(&ledger_path).unwrap()).unwrap();
    for (a, b) in before["records"].as_array().unwrap().iter().zip(ledger["records"].as_array().unwrap()) {
        assert_eq!(a["history"], b["history"]);
        assert!(b["test"].is_object());
        assert_eq!(b["test"]["multistep"].as_array().unwrap().len(), 2);
    }
    assert!(out.join(format!("eval/{hash}.json")).exists());
    assert!(out.join(format!("predictions/{hash}/fold0.csv")).exists());

    let stdout = with(&["report"]);
    assert!(stdout.contains('±'), "{stdout}");
    let aucs: Vec<f64> = ledger["records"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["test"]["question"]["auc"].as_f64().unwrap())
        .collect();
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;

    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let mut lines = report.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    assert_eq!(row[col("config_hash")], hash);
    assert!((row[col("test_auc_mean")].parse::<f64>().unwrap() - mean).abs() < 1e-12);
    assert!(row[col("test_auc")].contains('±'));
    assert_eq!(row[col("vs_best")], "◦");
}
