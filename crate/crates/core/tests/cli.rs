mod common;

use std::path::Path;
use std::process::{Command, Output};

fn lumen(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lumen"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn usage_errors_exit_one_with_config_help() {
    let dir = tempfile::tempdir().unwrap();
    let o = lumen(dir.path(), &["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lumen config"));
    assert_eq!(lumen(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(lumen(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"train": {"stepz": 1}}"#).unwrap();
    let o = lumen(dir.path(), &["--config", "bad.json", "config"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stepz"));
    let o = lumen(dir.path(), &["enhance", "--ckpt", "missing.ckpt", "--in", "x.png"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_prints_effective_tree() {
    let dir = tempfile::tempdir().unwrap();
    let o = lumen(dir.path(), &["--seed", "9", "config"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["train"]["seed"], 9);
    assert_eq!(v["sample"]["k"], 2);
}

#[test]
fn datagen_train_enhance_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.json"), common::tiny_config().to_json_pretty()).unwrap();
    let cfg = ["--config", "tiny.json"];

    let o = lumen(d, &[&cfg[..], &["--out", "data", "datagen"]].concat());
    assert!(o.status.success(), "{o:?}");
    assert!(d.join("data/train/low/00000.png").exists());
    assert!(d.join("data/val/meta/00000.json").exists());

    let o = lumen(d, &[&cfg[..], &["--out", "run", "train", "--data", "data/train"]].concat());
    assert!(o.status.success(), "{o:?}");
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["steps"], 3);
    assert!(d.join("run/final.ckpt").exists());
    assert_eq!(std::fs::read_to_string(d.join("run/train_log.jsonl")).unwrap().lines().count(), 3);

    let o = lumen(
        d,
        &[
            "--out", "out", "enhance", "--ckpt", "run/final.ckpt", "--in", "data/val/low/00001.png", "--k", "2",
        ],
    );
    assert!(o.status.success(), "{o:?}");
    assert!(d.join("out/x̂_1.png").exists() && d.join("out/x̂_2.png").exists());
    let job: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("out/job.json")).unwrap()).unwrap();
    assert_eq!(job["iterations"].as_array().unwrap().len(), 2);
    assert_eq!(stdout(&o).lines().count(), 2);

    let o = lumen(
        d,
        &[
            "--out", "eval", "eval", "--ckpt", "run/final.ckpt", "--data", "data/val", "--seeds", "2", "--k", "2",
            "--limit", "2",
        ],
    );
    assert!(o.status.success(), "{o:?}");
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["provenance"]["iterations"], 2);
    assert_eq!(report["per_image"].as_array().unwrap().len(), 4);
    assert!(d.join("eval/eval_k1.json").exists() && d.join("eval/eval_k2.json").exists());

    let o = lumen(
        d,
        &["instruct", "--in", "data/val/low/00000.png", "--meta", "data/val/meta/00000.json", "--facets", "lighting"],
    );
    assert!(o.status.success(), "{o:?}");
    let ins: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(ins["source"], "template");
    assert!(ins["facets"]["shadows"].is_null() || ins["facets"]["shadows"] == "");
}
