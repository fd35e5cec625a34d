use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dualfete::report::read_numeric_csv;
use dualfete::suite::{SuiteOptions, FIG3_VALUES, PHASE1, PROBE_LOG};
use dualfete_core::trainer::MetricsRecord;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualfete")).args(args).output().expect("run dualfete")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn quick_config(dir: &Path) -> std::path::PathBuf {
    let cfg = SuiteOptions::quick().base;
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string(&cfg).unwrap()).unwrap();
    p
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"steps": 3, "learning_rate": 0.1}"#).unwrap();
    let out = cli(&["train", "--config", path(&bad), "--out", path(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let out = cli(&["suite", "--name", "table9", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["train", "--config", path(&dir.path().join("nope.json")), "--out", path(dir.path())]);
    assert!(!out.status.success());
    assert_ne!(out.status.code(), Some(2));
}

#[test]
fn train_then_eval_on_exported_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let run = dir.path().join("run");
    let out = cli(&["train", "--config", path(&cfg), "--out", path(&run), "--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = read_numeric_csv(&run.join("log.csv")).unwrap();
    assert_eq!(log.header, MetricsRecord::COLUMNS);
    assert!(!log.rows.is_empty());
    let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.echo.json")).unwrap()).unwrap();
    assert_eq!(echo["seed"], 5);

    let data = dir.path().join("data");
    let out = cli(&["gen-data", "--seed", "3", "--n", "20", "--n-test", "4", "--size", "8", "--out", path(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = cli(&["eval", "--checkpoint", path(&run.join("student.dfte")), "--data", path(&data), "--perturb", "dropout", "--k", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rep: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rep["samples"], 4);
    assert_eq!(rep["perturbation"]["kind"], "dropout");
    assert!(rep["dice"].as_f64().unwrap() >= 0.0);

    // Synthetic data picks up the resolution recorded next to the checkpoint.
    let out = cli(&["eval", "--checkpoint", path(&run.join("phi.dfte")), "--data", "synthetic:1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn quick_fig3_writes_probe_tracks_from_a_shared_start() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["suite", "--name", "fig3", "--quick", "--out", path(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = read_csv_rows(&dir.path().join("summary.csv"));
    let expected: Vec<&str> = ["variant", "seed"].into_iter().chain(FIG3_VALUES).collect();
    assert_eq!(summary[0], expected);

    let seed = dir.path().join("seed0");
    let phase1 = read_numeric_csv(&seed.join(PHASE1).join(PROBE_LOG)).unwrap();
    assert_eq!(phase1.header, ["step", "disagreement", "pl_error", "fg_fraction"]);
    let phase1_end = phase1.column("step").unwrap().last().copied().unwrap();
    let phase1_row = &summary[1][2..5];
    for row in &summary[1..] {
        assert_eq!(&row[2..5], phase1_row, "variants must share the phase-one statistics");
        let variant = seed.join(&row[0]);
        let log = read_numeric_csv(&variant.join("log.csv")).unwrap();
        assert!(log.column("disag_train").is_some() && log.column("fg_pixel_frac_pl").is_some());
        let probe = read_numeric_csv(&variant.join(PROBE_LOG)).unwrap();
        assert!(probe.column("step").unwrap()[0] > phase1_end, "phase two continues the step counter");
    }
}

fn read_csv_rows(p: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(p).unwrap().lines().map(|l| l.split(',').map(String::from).collect()).collect()
}
