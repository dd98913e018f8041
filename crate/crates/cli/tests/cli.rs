use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lrds_core::data::round_half_up;

fn lrds(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lrds")).args(args).output().expect("run lrds")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path) -> PathBuf {
    let cfg = r#"{
        "dataset": {
            "source": "blobs",
            "train": {"class_count": 3, "samples_per_class": 30, "centers": [[0, 0], [3, 0], [1.5, 2.5]],
                      "spread": [0.5, 0.5, 0.5], "label_noise_rate": 0.05, "seed": 3},
            "test": {"class_count": 3, "samples_per_class": 20, "centers": [[0, 0], [3, 0], [1.5, 2.5]],
                     "spread": [0.5, 0.5, 0.5], "seed": 4}
        },
        "teacher": {"kind": "mlp", "model": {"layer_dims": [2, 12, 3], "seed": 0}},
        "student": {"layer_dims": [2, 4, 3], "seed": 1},
        "distill": {"epochs": 30, "batch_size": 16, "lr0": 0.05, "lr_decay_epochs": [20], "pct": 0.8},
        "influence": {"damping": 0.01},
        "output_dir": "out"
    }"#;
    let path = dir.join("config.json");
    std::fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn missing_config_exits_with_usage_code() {
    let out = lrds(&["teach", "--config", "/definitely/not/here.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/definitely/not/here.json"));
}

#[test]
fn bad_flags_exit_with_usage_code() {
    assert_eq!(lrds(&["teach"]).status.code(), Some(2));
    assert_eq!(lrds(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn mean_toy_scores_match_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/mean_toy.json");
    let out = dir.path();
    assert!(lrds(&["teach", "--config", arg(&config), "--out", arg(out)]).status.success());
    let teacher = out.join("teacher.json");
    let r = lrds(&["score", "--config", arg(&config), "--teacher", arg(&teacher), "--out", arg(out)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let scores = lrds_core::influence::read_scores_csv(&out.join("scores.csv")).unwrap();
    for (s, e) in scores.scores.iter().zip([1.0, 0.0, 1.0]) {
        assert!((s - e).abs() < 1e-8, "{:?}", scores.scores);
    }
}

#[test]
fn staged_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out = dir.path().join("out");

    let r = lrds(&["teach", "--config", arg(&config)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let teacher = out.join("teacher.json");
    let first = std::fs::read(&teacher).unwrap();
    assert!(lrds(&["teach", "--config", arg(&config)]).status.success());
    assert_eq!(first, std::fs::read(&teacher).unwrap(), "teach is not reproducible");
    let log = std::fs::read_to_string(out.join("teacher_log.csv")).unwrap();
    assert!(log.starts_with("# config_hash="));

    let r = lrds(&["score", "--config", arg(&config), "--teacher", arg(&teacher)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let scores_path = out.join("scores.csv");
    let scores = lrds_core::influence::read_scores_csv(&scores_path).unwrap();
    assert_eq!(scores.scores.len(), 90);
    let mut ranks = scores.ranks.clone();
    ranks.sort();
    assert_eq!(ranks, (0..90).collect::<Vec<_>>());

    let r = lrds(&["distill", "--config", arg(&config), "--teacher", arg(&teacher), "--scores", arg(&scores_path)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let plan: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("split_plan.json")).unwrap()).unwrap();
    assert_eq!(plan["dt_count"], round_half_up(0.8, 90));
    assert!(out.join("student.json").is_file());
    assert!(out.join("revised_labels.csv").is_file());

    let r = lrds(&["eval", "--config", arg(&config), "--model", arg(&out.join("student.json"))]);
    assert!(r.status.success());
    let acc: f64 = String::from_utf8_lossy(&r.stdout).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    // A teacher trained under another seed makes the scores stale.
    let other = dir.path().join("other");
    assert!(lrds(&["teach", "--config", arg(&config), "--seed", "9", "--out", arg(&other)]).status.success());
    let r = lrds(&[
        "distill",
        "--config",
        arg(&config),
        "--teacher",
        arg(&other.join("teacher.json")),
        "--scores",
        arg(&scores_path),
        "--out",
        arg(&other),
    ]);
    assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn ablation_counts_rows() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let spec = dir.path().join("ablation.json");
    std::fs::write(&spec, r#"{"parameter": "lambda1", "values": [0, 1, 4], "seeds": [0, 1, 2]}"#).unwrap();
    let r = lrds(&["ablate", "--config", arg(&config), "--ablation", arg(&spec)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = std::fs::read_to_string(dir.path().join("out/ablation_summary.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(2).collect();
    assert_eq!(rows.len(), 9 + 3);
    assert_eq!(rows.iter().filter(|r| r.contains(",mean,")).count(), 3);
}
