//! Exit codes and error reporting of the command-line surface.

use std::path::Path;
use std::process::{Command, Output};

fn marsnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_marsnet")).current_dir(dir).args(args).output().unwrap()
}

/// The last stderr line parsed as the error object.
fn error_of(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    let v: serde_json::Value = serde_json::from_str(line).expect("single-line JSON error");
    v["error"].clone()
}

#[test]
fn missing_dataset_is_an_input_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = marsnet(dir.path(), &["train", "--dataset", "no/such/dataset", "--out", "model"]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_of(&out);
    assert_eq!(e["kind"], "input");
    assert!(e["message"].as_str().unwrap().contains("no/such/dataset"));
    assert!(!dir.path().join("model").exists(), "nothing written before validation");
}

#[test]
fn unknown_config_keys_and_bad_flags_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[train]\nlearning_rte = 0.1\n").unwrap();
    let out = marsnet(dir.path(), &["--config", "bad.toml", "synth", "--out", "w"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_of(&out)["message"].as_str().unwrap().contains("learning_rte"));

    let out = marsnet(dir.path(), &["synth", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_of(&out)["kind"], "input");
}

#[test]
fn too_small_world_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = marsnet(dir.path(), &["synth", "--out", "w", "--width", "64", "--height", "64"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_needs_a_complete_mode() {
    let dir = tempfile::tempdir().unwrap();
    let out = marsnet(dir.path(), &["evaluate", "--out", "e.json"]);
    assert_eq!(out.status.code(), Some(2));
    let out = marsnet(dir.path(), &["evaluate", "--map", "m.tif", "--out", "e.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = marsnet(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["synth", "filter-gedi", "calibrate", "build-stack", "patchify", "train", "predict", "evaluate", "ablate", "histogram"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn filtering_and_calibration_on_a_small_world() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(marsnet(d, &["--seed", "3", "synth", "--out", "w", "--width", "128", "--height", "128"]).status.success());
    let out = marsnet(
        d,
        &["filter-gedi", "--footprints", "w/footprints.csv", "--ndvi", "w/ndvi.tif", "--forest-mask", "w/forest_mask.tif", "--out", "f.csv"],
    );
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("f.report.json")).unwrap()).unwrap();
    let dropped = ["dropped_quality", "dropped_sensitivity", "dropped_ndvi", "dropped_forest_mask"]
        .iter()
        .map(|k| report[k].as_u64().unwrap())
        .sum::<u64>();
    assert_eq!(report["input"].as_u64().unwrap(), dropped + report["kept"].as_u64().unwrap());
    assert!(marsnet(d, &["calibrate", "--plots", "w/plots.csv", "--footprints", "f.csv", "--out-dir", "cal"]).status.success());
    let cal = std::fs::read_to_string(d.join("cal/calibration.toml")).unwrap();
    let slope: f64 = cal.lines().find(|l| l.starts_with("slope")).unwrap().split('=').nth(1).unwrap().trim().parse().unwrap();
    assert!((slope - 0.73).abs() < 0.05, "{slope}");
    for f in ["rh_metrics.csv", "strata.json", "labels.csv"] {
        assert!(d.join("cal").join(f).is_file(), "{f}");
    }
}
