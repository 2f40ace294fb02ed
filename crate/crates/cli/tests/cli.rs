use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sensgrad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sensgrad"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn out_arg(dir: &Path) -> String {
    dir.to_str().unwrap().to_owned()
}

fn stripped_json(path: &Path) -> Value {
    let value: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    sensgrad::report::strip_metadata(value)
}

#[test]
fn curves_default_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = sensgrad(&["curves", "--out", &out_arg(dir.path())]);
    assert!(out.status.success());
    let text = fs::read_to_string(dir.path().join("curves.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epsilon_y,abs_f_y,k");
    assert_eq!(lines.len(), 1 + 7 * 1000);

    let rows: Vec<(f64, f64, f64)> = lines[1..]
        .iter()
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
            (f[0], f[1], f[2])
        })
        .collect();
    for &(_, f, _) in rows.iter().filter(|r| r.0 == -1.0) {
        assert_eq!(f, 1.0);
    }
    let mut at_half: Vec<(f64, f64)> = rows.iter().filter(|r| r.0 == -0.5).map(|r| (r.2, r.1)).collect();
    assert_eq!(at_half.len(), 7);
    at_half.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    assert!(at_half.windows(2).all(|w| w[1].1 < w[0].1), "{at_half:?}");
}

#[test]
fn curves_unwritable_output_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = sensgrad(&["curves", "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_passes_and_mutant_fails() {
    let dir = tempfile::tempdir().unwrap();
    let base = ["verify", "--samples", "5000", "--networks", "5", "--out"];
    let mut args: Vec<&str> = base.to_vec();
    let out_dir = out_arg(dir.path());
    args.push(&out_dir);

    let ok = sensgrad(&args);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let verdicts: Value = serde_json::from_slice(&ok.stdout).unwrap();
    let verdicts = verdicts.as_array().unwrap();
    assert!(verdicts.iter().all(|v| v["pass"] == Value::Bool(true)));
    for key in ["check", "k", "metric", "value", "tolerance", "pass"] {
        assert!(verdicts[0].get(key).is_some(), "missing {key}");
    }

    args.push("--inject-mutant");
    assert_eq!(sensgrad(&args).status.code(), Some(1));
}

#[test]
fn verify_symmetric_only_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let out = sensgrad(&[
        "verify",
        "--k-grid",
        "1",
        "--samples",
        "2000",
        "--networks",
        "3",
        "--out",
        &out_arg(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let verdicts: Value = serde_json::from_slice(&out.stdout).unwrap();
    let mixed: Vec<&Value> = verdicts
        .as_array()
        .unwrap()
        .iter()
        .filter(|v| v["check"] == "mixed_partials_asymmetry")
        .collect();
    assert_eq!(mixed.len(), 1);
    assert_eq!(mixed[0]["k"], 1.0);
}

#[test]
fn toy_bad_alpha_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sensgrad(&["toy", "--alpha", "0.4", "--out", &out_arg(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn toy_single_run_has_no_spread_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = sensgrad(&[
        "toy",
        "--runs",
        "1",
        "--examples",
        "500",
        "--max-epochs",
        "50",
        "--out",
        &out_arg(dir.path()),
    ]);
    assert!(out.status.success());
    let table = fs::read_to_string(dir.path().join("toy_table.csv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), "k,runs,mean_test_error,mean_threshold,mean_ce,mean_epochs");
    assert_eq!(table.lines().count(), 1 + 7);
    let summary = stripped_json(&dir.path().join("toy_summary.json"));
    assert!(summary["rows"][0].get("std_test_error").is_none());
}

#[test]
fn toy_outputs_are_reproducible_across_job_counts() {
    let run = |jobs: &str| {
        let dir = tempfile::tempdir().unwrap();
        let out = sensgrad(&[
            "toy",
            "--runs",
            "2",
            "--examples",
            "400",
            "--max-epochs",
            "80",
            "--k-grid",
            "2,1,0.5",
            "--seed",
            "17",
            "--jobs",
            jobs,
            "--out",
            &out_arg(dir.path()),
        ]);
        assert!(out.status.success());
        (
            fs::read(dir.path().join("toy_trials.csv")).unwrap(),
            fs::read(dir.path().join("toy_table.csv")).unwrap(),
            stripped_json(&dir.path().join("toy_summary.json")),
        )
    };
    let a = run("1");
    let b = run("1");
    let c = run("3");
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2["rows"], b.2["rows"]);
    assert_eq!(a.0, c.0);
    assert_eq!(a.1, c.1);
    // The job count itself is recorded in the config block.
    assert_eq!(a.2["rows"], c.2["rows"]);
    assert_eq!(a.2["trials"], c.2["trials"]);
}

#[test]
fn cv_single_k_is_eta_search() {
    let dir = tempfile::tempdir().unwrap();
    let out = sensgrad(&[
        "cv",
        "--dataset",
        "toy",
        "--examples",
        "600",
        "--k-grid",
        "1",
        "--t",
        "2",
        "--max-epochs",
        "40",
        "--out",
        &out_arg(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = stripped_json(&dir.path().join("cv_summary.json"));
    assert_eq!(summary["selected_k"], 1.0);
    assert_eq!(summary["selected_eta"], summary["baseline_eta"]);
    assert_eq!(summary["selected_test_error"], summary["baseline_test_error"]);
    let table = fs::read_to_string(dir.path().join("cv_err_table.csv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), "k,eta,err,std,diverged_rounds");
    assert!(table.lines().skip(1).all(|l| l.starts_with("1,")));
    assert!(table.lines().count() >= 4);
}

#[test]
fn cv_missing_dataset_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent-idx");
    let out = sensgrad(&[
        "cv",
        "--dataset",
        "mnist",
        "--images",
        missing.to_str().unwrap(),
        "--labels",
        missing.to_str().unwrap(),
        "--out",
        &out_arg(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_values_apply_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    fs::write(
        &config,
        r#"{"format_version": 1, "k_grid": [2, 1], "points": 10, "seed": 3}"#,
    )
    .unwrap();
    let out = sensgrad(&["curves", "--config", config.to_str().unwrap(), "--out", &out_arg(dir.path())]);
    assert!(out.status.success());
    let text = fs::read_to_string(dir.path().join("curves.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 10);

    let out = sensgrad(&[
        "curves",
        "--config",
        config.to_str().unwrap(),
        "--points",
        "4",
        "--out",
        &out_arg(dir.path()),
    ]);
    assert!(out.status.success());
    let text = fs::read_to_string(dir.path().join("curves.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 4);
}

#[test]
fn config_file_rejects_wrong_version_and_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    for body in [r#"{"format_version": 2}"#, r#"{"format_version": 1, "colour": 3}"#, "not json"] {
        fs::write(&config, body).unwrap();
        let out = sensgrad(&["curves", "--config", config.to_str().unwrap(), "--out", &out_arg(dir.path())]);
        assert_eq!(out.status.code(), Some(2), "{body}");
    }
}
