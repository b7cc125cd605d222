use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn coughband(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coughband"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = coughband(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn stagewise_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let clips = dir.path().join("clips");
    let specs = dir.path().join("specs");
    let model = dir.path().join("fold0.bin");
    let explain = dir.path().join("explain");
    let features = dir.path().join("features.csv");
    let results = dir.path().join("results");
    let report = dir.path().join("report");
    let manifest = data.join("manifest.json");

    ok(&["synth", "--out", p(&data), "--patients", "2", "--coughs", "3", "--non-coughs", "3", "--seed", "4"]);
    assert!(manifest.is_file());
    ok(&["ingest", "--manifest", p(&manifest), "--out", p(&clips)]);
    ok(&["spectrogram", "--clips", p(&clips), "--out", p(&specs)]);
    let train_cfg = dir.path().join("train.json");
    fs::write(&train_cfg, r#"{"folds": 2}"#).unwrap();
    ok(&[
        "train", "--specs", p(&specs), "--manifest", p(&manifest), "--fold", "0", "--seed", "1", "--out", p(&model),
        "--config", p(&train_cfg), "--epochs", "1", "--batch-size", "4",
    ]);
    assert!(model.is_file());

    let predictions = ok(&["eval", "--model", p(&model), "--specs", p(&specs)]);
    let mut lines = predictions.lines();
    assert!(lines.next().unwrap().contains("p_cough"));
    assert_eq!(lines.count(), 4 * 6);

    ok(&[
        "explain", "--model", p(&model), "--specs", p(&specs), "--th", "60,80", "--cutoff", "0", "--stride-k", "10",
        "--stride-n", "25", "--out", p(&explain),
    ]);
    ok(&["features", "--weighted", p(&explain), "--out", p(&features)]);
    let table = fs::read_to_string(&features).unwrap();
    assert_eq!(table.lines().count(), 1 + 4 * 2 * 6);

    ok(&[
        "compare", "--features", p(&features), "--manifest", p(&manifest), "--th", "60,80", "--groups", "G1", "--out",
        p(&results),
    ]);
    let comparisons = fs::read_to_string(results.join("comparisons.csv")).unwrap();
    assert_eq!(comparisons.lines().count(), 1 + 2 * 6 * 7);

    ok(&[
        "report", "--results", p(&results), "--features", p(&features), "--manifest", p(&manifest), "--out", p(&report),
        "--svg",
    ]);
    assert!(report.join("boxplots.json").is_file());
}

#[test]
fn bad_config_exits_nonzero_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(&config, r#"{"manifest": "missing.json", "work_dir": "work", "th_list": [150]}"#).unwrap();
    let out = coughband(&["run", "--config", p(&config)]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error:"), "{stderr}");
}

#[test]
fn unknown_subcommand_is_rejected() {
    let out = coughband(&["frobnicate"]);
    assert!(!out.status.success());
}
