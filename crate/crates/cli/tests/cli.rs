use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "task": { "feature_dim": 8, "train_size": 80, "test_size": 40 },
  "model": { "layers": 2 },
  "train": { "epochs": 1, "batch_size": 16 }
}"#;

fn stam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stam"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

/// Runs `args` into two fresh directories and returns both sets of files.
fn twice(sub: &[&str], files: &[&str]) -> Vec<(Vec<u8>, Vec<u8>)> {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let outs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let mut args = sub.to_vec();
            args.extend(["--config", &config, "--out", out.to_str().unwrap()]);
            let result = stam(&args);
            assert!(
                result.status.success(),
                "{sub:?}: {}",
                String::from_utf8_lossy(&result.stderr)
            );
            out
        })
        .collect();
    files
        .iter()
        .map(|f| {
            (
                fs::read(outs[0].join(f)).unwrap(),
                fs::read(outs[1].join(f)).unwrap(),
            )
        })
        .collect()
}

fn assert_identical(sub: &[&str], files: &[&str]) {
    for ((a, b), name) in twice(sub, files).iter().zip(files) {
        assert!(!a.is_empty(), "{sub:?} wrote an empty {name}");
        assert_eq!(a, b, "{sub:?}: {name} differs between runs");
    }
}

#[test]
fn train_is_reproducible() {
    assert_identical(&["train"], &["metrics.csv", "trace.json"]);
}

#[test]
fn export_trace_is_reproducible() {
    assert_identical(
        &["export-trace", "--samples", "0,3,9"],
        &["metrics.csv", "trace.json"],
    );
}

#[test]
fn sweep_layers_is_reproducible() {
    assert_identical(
        &["sweep-layers", "--counts", "0,1", "--seeds", "2"],
        &["metrics.csv"],
    );
}

#[test]
fn compare_baselines_is_reproducible() {
    assert_identical(&["compare-baselines", "--seeds", "1"], &["metrics.csv"]);
}

#[test]
fn gen_data_is_reproducible() {
    assert_identical(&["gen-data"], &["dataset.bin"]);
}

#[test]
fn oracle_is_reproducible() {
    assert_identical(&["oracle", "--draws", "2000"], &["calibration.json"]);
}

#[test]
fn metrics_have_one_row_per_run() {
    let files = twice(
        &["sweep-layers", "--counts", "0,1,2", "--seeds", "2"],
        &["metrics.csv"],
    );
    let text = String::from_utf8(files[0].0.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("config_hash,variant,seed,test_accuracy"));
    assert_eq!(lines.len(), 1 + 6);
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("o");
    let r = stam(&[
        "train",
        "--config",
        &config,
        "--out",
        out.to_str().unwrap(),
        "--layers",
        "1",
        "--init",
        "avg",
        "--seed",
        "5",
        "--lambda",
        "0.5,1",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(
        csv.lines().nth(1).unwrap().contains(",stam-avg-m1,5,"),
        "{csv}"
    );
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), r#"{ "task": { "signal_clips": 9 } }"#);
    assert_eq!(stam(&["train", "--config", &bad]).status.code(), Some(2));
    let unknown = write_config(dir.path(), r#"{ "tsak": {} }"#);
    assert_eq!(
        stam(&["gen-data", "--config", &unknown]).status.code(),
        Some(2)
    );
    let lambdas = stam(&[
        "train",
        "--lambda",
        "1,1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(lambdas.status.code(), Some(2));
    let missing = dir.path().join("nope.json");
    assert_eq!(
        stam(&["oracle", "--config", missing.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn non_finite_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{ "task": { "feature_dim": 4, "train_size": 8, "test_size": 4, "signal_strength": 1e300 } }"#,
    );
    let r = stam(&[
        "train",
        "--config",
        &config,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("epoch 0, batch 0"));
}

#[test]
fn gradient_check_passes_and_fails_by_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{ "task": { "feature_dim": 6 }, "model": { "layers": 1 } }"#,
    );
    let ok = stam(&["check-grads", "--config", &config]);
    assert!(
        ok.status.success(),
        "{}",
        String::from_utf8_lossy(&ok.stdout)
    );
    assert!(String::from_utf8_lossy(&ok.stdout).contains("PASS"));
    let strict = stam(&["check-grads", "--config", &config, "--tolerance", "1e-30"]);
    assert_eq!(strict.status.code(), Some(4));
}

#[test]
fn unknown_sample_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let r = stam(&[
        "export-trace",
        "--config",
        &config,
        "--samples",
        "40",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("unknown sample id 40"));
}
