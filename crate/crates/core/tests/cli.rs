use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_concept-crc");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path) {
    let out = run(&["synth", "--samples-per-class", "20", "--test-per-class", "10", "--out-dir", s(dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(run(&["calibrate", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn pipeline_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out_dir = dir.path().join("out");
    let out = run(&["pipeline", "--config", s(&dir.path().join("config.json")), "--output-dir", s(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "calibration.json",
        "train_augmented.ndjson",
        "model.json",
        "eval_report.json",
        "cca_vs_nec.dat",
        "risk_curves.dat",
        "training_log.csv",
        "held_out_risk.json",
    ] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }
    assert!(String::from_utf8_lossy(&out.stdout).contains("overall accuracy"));
}

#[test]
fn missing_catalog_names_catalog() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = run(&[
        "pipeline",
        "--config",
        s(&dir.path().join("config.json")),
        "--catalog",
        s(&dir.path().join("nope.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("catalog"));
}

#[test]
fn validation_failure_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let bad = dir.path().join("bad.ndjson");
    std::fs::write(
        &bad,
        r#"{"id":"x","label":0,"embedding":[1,0,0],"detections":[{"concept_id":0,"confidence":1.2,"box":[1,1,2,2]}]}"#,
    )
    .unwrap();
    let out = run(&["validate", "--samples", s(&bad), "--catalog", s(&dir.path().join("catalog.json"))]);
    assert_eq!(out.status.code(), Some(2));
    let ok = run(&[
        "validate",
        "--samples",
        s(&dir.path().join("train.ndjson")),
        "--catalog",
        s(&dir.path().join("catalog.json")),
    ]);
    assert!(ok.status.success());
}

#[test]
fn staged_commands_chain_and_divergence_is_numeric() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let cat = d.join("catalog.json");
    let step = |args: &[&str]| {
        let out = run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    step(&["calibrate", "--cal", s(&d.join("test.ndjson")), "--catalog", s(&cat), "--out", s(&d.join("cal.json"))]);
    assert!(d.join("risk_curves.dat").exists());
    step(&[
        "build",
        "--train",
        s(&d.join("train.ndjson")),
        "--catalog",
        s(&cat),
        "--calibration",
        s(&d.join("cal.json")),
        "--out",
        s(&d.join("lab.ndjson")),
        "--vocab-out",
        s(&d.join("vocab.json")),
    ]);
    step(&[
        "augment",
        "--labeled",
        s(&d.join("lab.ndjson")),
        "--vocab",
        s(&d.join("vocab.json")),
        "--calibration",
        s(&d.join("cal.json")),
        "--catalog",
        s(&cat),
        "--min-count",
        "25",
        "--out",
        s(&d.join("aug.ndjson")),
    ]);
    step(&[
        "train",
        "--labeled",
        s(&d.join("aug.ndjson")),
        "--vocab",
        s(&d.join("vocab.json")),
        "--catalog",
        s(&cat),
        "--epochs",
        "20",
        "--out",
        s(&d.join("model.json")),
        "--log",
        s(&d.join("log.csv")),
    ]);
    step(&[
        "evaluate",
        "--model",
        s(&d.join("model.json")),
        "--test",
        s(&d.join("test.ndjson")),
        "--catalog",
        s(&cat),
        "--nec",
        "3",
        "--out-dir",
        s(&d.join("ev")),
    ]);
    assert!(d.join("ev/eval_report.json").exists());

    let out = run(&[
        "train",
        "--labeled",
        s(&d.join("aug.ndjson")),
        "--vocab",
        s(&d.join("vocab.json")),
        "--catalog",
        s(&cat),
        "--learning-rate",
        "1e300",
        "--out",
        s(&d.join("bad.json")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn crc_check_reports_shift() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "crc-check",
        "--trials",
        "100",
        "--n-cal",
        "50",
        "--shift",
        "0.5",
        "--out-dir",
        s(dir.path()),
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("NotCoveredByTheorem"));
    assert!(dir.path().join("coverage.dat").exists());
}
