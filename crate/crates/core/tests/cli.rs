use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn ccl() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ccl"));
    c.env_remove("CCL_DATA_ROOT");
    c
}

fn run(args: &[&str]) -> Output {
    ccl().args(args).output().expect("spawn ccl")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "ccl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn count_files(dir: &Path, ext: &str) -> usize {
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            n += count_files(&path, ext);
        } else if path.extension().is_some_and(|e| e == ext) {
            n += 1;
        }
    }
    n
}

/// Three classes, 4 train / 2 test each, 32 px.
fn dataset(tmp: &TempDir) -> PathBuf {
    let data = tmp.path().join("data");
    ok(&[
        "make-synthetic",
        "--out",
        p(&data),
        "--train-per-class",
        "4",
        "--test-per-class",
        "2",
        "--size",
        "32",
        "--seed",
        "3",
    ]);
    data
}

fn quick_config(tmp: &TempDir) -> PathBuf {
    let path = tmp.path().join("quick.json");
    fs::write(&path, r#"{"steps_per_epoch": 1, "batch_size": 4}"#).unwrap();
    path
}

fn train(data: &Path, config: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec![
        "train",
        "--data",
        p(data),
        "--config",
        p(config),
        "--out",
        p(out),
        "--resolution",
        "32",
        "--max-epochs",
        "2",
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn make_synthetic_writes_the_expected_tree() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp);
    let classes: Vec<_> = fs::read_dir(&data).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).collect();
    assert_eq!(classes.len(), 3);
    // 12 train + 6 test images + one mask per anomalous test image
    assert_eq!(count_files(&data, "png"), 12 + 6 + 3);
    assert!(data.join("manifest.json").exists());
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["eval", "--data", "x"]).status.code(), Some(2));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_1() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp);
    let out = run(&["eval", "--data", p(&data), "--checkpoint", "/nonexistent", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = run(&["cluster", "--data", p(&data), "--kc", "50", "--out", p(&tmp.path().join("c"))]);
    assert_eq!(out.status.code(), Some(1));

    let out = run(&["train", "--data", p(&data), "--out", p(&tmp.path().join("t")), "--k", "2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("odd"));
}

#[test]
fn cluster_writes_one_label_per_train_image() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp);
    let out = tmp.path().join("clusters");
    ok(&["cluster", "--data", p(&data), "--kc", "3", "--out", p(&out), "--resolution", "32"]);
    let labels = fs::read_to_string(out.join("labels.tsv")).unwrap();
    let ids: std::collections::BTreeSet<&str> = labels.lines().map(|l| l.split('\t').nth(1).unwrap()).collect();
    assert_eq!(labels.lines().count(), 12);
    assert_eq!(ids.len(), 3);
    assert!(out.join("cluster.json").exists() && out.join("manifest.json").exists());
}

#[test]
fn train_eval_score_pipeline_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp);
    let config = quick_config(&tmp);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train(&data, &config, &a, &["--seed", "4"]);
    train(&data, &config, &b, &["--seed", "4"]);
    for f in ["checkpoint.bin", "train_log.csv", "config.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let log = fs::read_to_string(a.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2, "header plus one row per step");

    let (ea, eb) = (tmp.path().join("ea"), tmp.path().join("eb"));
    ok(&["eval", "--data", p(&data), "--checkpoint", p(&a), "--out", p(&ea)]);
    ok(&["report", "--data", p(&data), "--checkpoint", p(&a.join("checkpoint.bin")), "--out", p(&eb)]);
    for f in ["metrics.json", "metrics.csv"] {
        assert_eq!(fs::read(ea.join(f)).unwrap(), fs::read(eb.join(f)).unwrap(), "{f} differs");
    }
    let csv = fs::read_to_string(ea.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("class,i_auroc,p_auroc,pro"));
    assert_eq!(csv.lines().count(), 1 + 3 + 1);

    let s = tmp.path().join("scores");
    ok(&["score", "--data", p(&data), "--checkpoint", p(&a), "--out", p(&s)]);
    assert_eq!(fs::read_to_string(s.join("scores.tsv")).unwrap().lines().count(), 6);
    assert_eq!(count_files(&s.join("heatmaps"), "png"), 6);
    assert!(s.join("heatmaps/normalization.json").exists());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(s.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "score");
}

#[test]
fn data_root_can_come_from_the_environment() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp);
    let out = tmp.path().join("c");
    let status = ccl()
        .env("CCL_DATA_ROOT", &data)
        .args(["cluster", "--kc", "3", "--out", p(&out), "--resolution", "32"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("labels.tsv").exists());
}

#[test]
fn pseudo_labels_and_label_files_train() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp);
    let config = quick_config(&tmp);
    train(&data, &config, &tmp.path().join("pseudo"), &["--labels", "pseudo"]);
    let clusters = tmp.path().join("clusters");
    ok(&["cluster", "--data", p(&data), "--kc", "3", "--out", p(&clusters), "--resolution", "32"]);
    let labels = clusters.join("labels.tsv");
    train(&data, &config, &tmp.path().join("file"), &["--labels", p(&labels)]);
}

#[test]
fn masks_as_maps_report_perfect_localization() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(&tmp);
    let run_dir = tmp.path().join("run");
    train(&data, &quick_config(&tmp), &run_dir, &["--lambda1", "0", "--lambda2", "0"]);
    let out = tmp.path().join("oracle");
    ok(&["eval", "--data", p(&data), "--checkpoint", p(&run_dir), "--out", p(&out), "--use-masks-as-maps"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["mean"]["p_auroc"], 1.0);
    assert_eq!(report["mean"]["pro"], 1.0);
    assert_eq!(report["mean"]["i_auroc"], 1.0);
}
