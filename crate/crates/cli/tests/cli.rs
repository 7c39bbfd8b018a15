//! Exit-code and error-output contracts of the binary.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pressgen"))
}

fn write(path: &Path, content: &str) {
    std::fs::write(path, content).unwrap();
}

const TINY_SYNTH: &str = r#"{
  "seed": 1,
  "run_dir": "run",
  "synth": {
    "out_dir": "data",
    "sequences_per_class": 2,
    "frames_per_sequence": 8,
    "height": 8,
    "width": 4,
    "classes": ["basic", "yoga"]
  }
}"#;

#[test]
fn missing_config_file_is_exit_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = bin()
        .args(["synth", "--config", missing.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let line = stderr.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    assert_eq!(v["code"], 2);
    assert!(v["path"].as_str().unwrap().contains("nope.json"));
}

#[test]
fn invalid_config_is_exit_3_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    // sequences_per_class = 0 fails validation
    write(
        &cfg,
        r#"{"seed": 1, "run_dir": "run", "synth": {"out_dir": "data", "sequences_per_class": 0}}"#,
    );
    let out = bin()
        .args(["synth", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let v: serde_json::Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(v["code"], 3);
    assert!(v["field"].as_str().unwrap().contains("synth"));
}

#[test]
fn malformed_json_is_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    write(&cfg, "{ not json");
    let out = bin()
        .args(["synth", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn missing_upstream_artifact_is_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    write(
        &cfg,
        r#"{
  "seed": 1,
  "run_dir": "run",
  "generator": {
    "dataset": "data/manifest.json",
    "codec_checkpoint": "run/codec.ckpt",
    "model": {"layers": 1, "heads": 1, "width": 8, "max_len": 4,
              "sampling": {"mode": "greedy"}, "seed": 0, "text_dim": 16}
  }
}"#,
    );
    let out = bin()
        .args(["train-generator", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let v: serde_json::Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(v["code"], 4);
    assert!(v["path"].as_str().unwrap().contains("codec.ckpt"));
}

#[test]
fn synth_writes_dataset_manifest_and_run_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    write(&cfg, TINY_SYNTH);
    let out = bin()
        .args(["synth", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("data/manifest.json").is_file());
    let rm_path = dir.path().join("run/run-manifest-synth.json");
    assert!(rm_path.is_file());
    let rm: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&rm_path).unwrap()).unwrap();
    assert_eq!(rm["command"], "synth");
    // config snapshot is byte-identical to the input
    assert_eq!(rm["config_snapshot"].as_str().unwrap(), TINY_SYNTH);
    assert!(rm["timings"]["total_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn leaked_har_plan_is_exit_3_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    write(
        &cfg,
        r#"{
  "seed": 1,
  "run_dir": "run",
  "synth": {
    "out_dir": "data",
    "sequences_per_class": 2,
    "frames_per_sequence": 16,
    "height": 8,
    "width": 4,
    "classes": ["basic", "yoga"]
  },
  "har": {
    "recipes": [{"name": "real-only", "manifests": ["data"]}],
    "eval_manifest": "data",
    "window_len": 8,
    "stride": 8,
    "repetitions": 1,
    "train": {"hidden": 4, "learning_rate": 0.001, "lr_decay": 1.0, "steps": 5,
              "batch_size": 4, "seed": 0, "val_fraction": 0.1, "eval_every": 5,
              "patience": null}
  }
}"#,
    );
    let synth = bin()
        .args(["synth", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(synth.status.success());
    let out = bin()
        .args(["har", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("shares"), "stderr: {stderr}");
}
