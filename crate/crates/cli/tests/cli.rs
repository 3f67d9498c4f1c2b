use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mtrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtrec")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A small successor corpus with a two-epoch config, written into `dir`.
fn corpus(dir: &Path) -> std::path::PathBuf {
    let out = mtrec(&["synth", "--kind", "successor", "--out", p(dir), "--sessions", "300"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let config = dir.join("config.json");
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&config).unwrap()).unwrap();
    v["training"]["max_epochs"] = 2.into();
    fs::write(&config, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    config
}

fn json_lines(out: &Output) -> Vec<Value> {
    String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn prepare_reports_counts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = corpus(dir.path());
    let first = mtrec(&["prepare", "--config", p(&config)]);
    assert_eq!(code(&first), 0);
    let stats = &json_lines(&first)[0];
    let sessions: Vec<Value> = fs::read_to_string(dir.path().join("sessions.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let expected: u64 = sessions.iter().map(|s| s["items"].as_array().unwrap().len() as u64 - 1).sum();
    let total = ["train_examples", "valid_examples", "test_examples"]
        .iter()
        .map(|k| stats[k].as_u64().unwrap())
        .sum::<u64>();
    assert_eq!(total, expected);

    let prepared = dir.path().join("run/prepared");
    let before = fs::read(prepared.join("train.jsonl")).unwrap();
    let tok_before = fs::read(prepared.join("tokenizers/title.json")).unwrap();
    assert_eq!(code(&mtrec(&["prepare", "--config", p(&config)])), 0);
    assert_eq!(fs::read(prepared.join("train.jsonl")).unwrap(), before);
    assert_eq!(fs::read(prepared.join("tokenizers/title.json")).unwrap(), tok_before);
}

#[test]
fn missing_catalog_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = corpus(dir.path());
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&config).unwrap()).unwrap();
    v["paths"].as_object_mut().unwrap().remove("catalog");
    fs::write(&config, v.to_string()).unwrap();
    let out = mtrec(&["prepare", "--config", p(&config)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("catalog"));
}

#[test]
fn bad_arguments_exit_with_one_and_help_with_zero() {
    assert_eq!(code(&mtrec(&["train"])), 1);
    assert_eq!(code(&mtrec(&["frobnicate"])), 1);
    assert_eq!(code(&mtrec(&["--help"])), 0);
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let out = mtrec(&["recommend", "--checkpoint", "/nonexistent/model.ckpt", "a"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn training_twice_gives_identical_checkpoints_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    let config = corpus(dir.path());
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    let first = mtrec(&["train", "--config", p(&config), "--checkpoint", p(&a), "--seed", "5"]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    let log_a = fs::read_to_string(dir.path().join("run/train_log.jsonl")).unwrap();
    let second = mtrec(&["train", "--config", p(&config), "--checkpoint", p(&b), "--seed", "5"]);
    assert_eq!(code(&second), 0);
    let log_b = fs::read_to_string(dir.path().join("run/train_log.jsonl")).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(log_a.lines().filter(|l| l.contains("\"epoch\"")).count(), 2);
    // the checkpoint path differs between runs, so compare only the epoch lines
    let epochs = |log: &str| log.lines().filter(|l| l.contains("\"event\":\"epoch\"")).map(String::from).collect::<Vec<_>>();
    assert_eq!(epochs(&log_a), epochs(&log_b));

    let other = dir.path().join("c.ckpt");
    assert_eq!(code(&mtrec(&["train", "--config", p(&config), "--checkpoint", p(&other), "--seed", "6"])), 0);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&other).unwrap());
}

#[test]
fn eval_and_recommend_from_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = corpus(dir.path());
    let ckpt = dir.path().join("model.ckpt");
    assert_eq!(code(&mtrec(&["train", "--config", p(&config), "--checkpoint", p(&ckpt)])), 0);

    let report = dir.path().join("run/eval_report.json");
    assert_eq!(code(&mtrec(&["eval", "--config", p(&config), "--checkpoint", p(&ckpt), "--k", "5"])), 0);
    let first = fs::read(&report).unwrap();
    assert_eq!(code(&mtrec(&["eval", "--config", p(&config), "--checkpoint", p(&ckpt), "--k", "5"])), 0);
    assert_eq!(fs::read(&report).unwrap(), first);
    let v: Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(v["k"], 5);

    let out = mtrec(&["recommend", "--checkpoint", p(&ckpt), "--k", "3", "s001", "s002", "never-seen"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rec: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rec["unknown_items"], 1);
    assert_eq!(rec["items"].as_array().unwrap().len(), 3);
    assert!(rec["categories"]["category"].as_array().unwrap().len() <= 3);

    // k beyond the label space returns every label once
    let out = mtrec(&["recommend", "--checkpoint", p(&ckpt), "--k", "100000", "s001"]);
    assert_eq!(code(&out), 0);
    let rec: Value = serde_json::from_slice(&out.stdout).unwrap();
    let items: Vec<&str> = rec["items"].as_array().unwrap().iter().map(|i| i["label"].as_str().unwrap()).collect();
    let unique: std::collections::BTreeSet<_> = items.iter().collect();
    assert_eq!(unique.len(), items.len());
    assert!(items.len() <= 50);

    assert_eq!(code(&mtrec(&["recommend", "--checkpoint", p(&ckpt), "--k", "0", "s001"])), 1);
}

#[test]
fn gradcheck_passes_on_the_synthetic_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = corpus(dir.path());
    let out = mtrec(&["gradcheck", "--config", p(&config)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let lines = json_lines(&out);
    assert_eq!(lines.last().unwrap()["pass"], true);
    assert!(lines.iter().any(|l| l["group"] == "head.item"));
}
