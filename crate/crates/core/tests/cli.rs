mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn genrank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genrank")).args(args).output().expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth(dir: &Path, name: &str, n: usize, seed: u64) -> String {
    let path = dir.join(name).to_string_lossy().into_owned();
    let out = genrank(&["synth", "--n", &n.to_string(), "--seed", &seed.to_string(), "--max-ops", "2", "--out", &path]);
    assert!(out.status.success(), "{}", stderr(&out));
    path
}

const TINY: [&str; 22] = [
    "--finetune-epochs", "2", "--joint-epochs", "2", "--d-model", "8", "--heads", "2", "--ff-dim", "8",
    "--encoder-layers", "1", "--decoder-layers", "1", "--beam-size", "3", "--bank-size", "6", "--max-len", "10",
    "--lr", "0.001",
];

fn train(data: &str, out: &Path, extra: &[&str]) -> Output {
    let out_dir = out.to_string_lossy().into_owned();
    let mut args = vec!["train", "--train", data, "--out", &out_dir];
    args.extend(TINY);
    args.extend(extra);
    genrank(&args)
}

#[test]
fn synth_is_deterministic() {
    let a = genrank(&["synth", "--n", "20", "--seed", "3"]);
    let b = genrank(&["synth", "--n", "20", "--seed", "3"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(String::from_utf8_lossy(&a.stdout).lines().count(), 20);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(genrank(&["synth"]).status.code(), Some(2));
    assert_eq!(genrank(&["synth", "--n", "0"]).status.code(), Some(2));
    assert_eq!(genrank(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(genrank(&["solve", "--checkpoint", "/nonexistent/ck.json", "--text", "1 + 2"]).status.code(), Some(2));
    assert_eq!(genrank(&["train", "--train", "/nonexistent/train.jsonl", "--out", "/tmp"]).status.code(), Some(2));
    let out = genrank(&["disturb", "--expr", "NUM0", "--numbers", "4", "--kind", "delete"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("single leaf"));
    let out = genrank(&["disturb", "--expr", "NUM0 + NUM0", "--numbers", "4", "--kind", "edit"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(genrank(&["--help"]).status.success());
}

#[test]
fn disturb_prints_label() {
    let out = genrank(&["disturb", "--expr", "NUM0 * NUM1 / NUM2", "--numbers", "25,12,20", "--kind", "swap", "--seed", "1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("before: NUM0 * NUM1 / NUM2  = 15"), "{text}");
    assert!(text.contains("label:"));
}

#[test]
fn malformed_dataset_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    fs::write(&path, "{\"id\":\"a\",\"text\":\"3 apples\",\"equation\":\"3\"}\n{\"id\": 4}\n").unwrap();
    let out = train(&path.to_string_lossy(), &dir.path().join("run"), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "train.jsonl", 10, 1);
    let config = dir.path().join("run.json");
    fs::write(&config, r#"{"beam_width": 5}"#).unwrap();
    let out = genrank(&["train", "--config", &config.to_string_lossy(), "--train", &data, "--out", "/tmp/unused"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("beam_width"), "{}", stderr(&out));
}

#[test]
fn train_then_solve_eval_and_bank() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "train.jsonl", 40, 2);
    let run = dir.path().join("run");
    let out = train(&data, &run, &["--folds", "4", "--fold", "0"]);
    assert!(out.status.success(), "{}", stderr(&out));
    for file in ["config.json", "checkpoint.json", "train_log.jsonl", "state.json"] {
        assert!(run.join(file).exists(), "{file}");
    }
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0]["phase"], "finetune");
    assert_eq!(lines[2]["phase"], "joint");
    assert!(lines[0]["J_RANK"].is_null() && lines[2]["J_RANK"].is_number());
    assert!(lines.iter().all(|l| l["dev_accuracy"].is_number()));
    let checkpoint = run.join("checkpoint.json").to_string_lossy().into_owned();

    let out = genrank(&["solve", "--checkpoint", &checkpoint, "--text", "Tom has 5 apples and 7 pears .", "-k", "3", "--json"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let solved: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(solved["candidates"].as_array().unwrap().len(), 3);

    let input = dir.path().join("input.jsonl");
    fs::write(&input, "{\"id\": \"q1\", \"text\": \"5 and 7\"}\n{\"text\": 3}\n").unwrap();
    let out = genrank(&["solve", "--checkpoint", &checkpoint, "--input", &input.to_string_lossy()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));

    let verdicts = dir.path().join("verdicts.jsonl");
    let report = dir.path().join("report.json");
    let out = genrank(&[
        "eval", "--checkpoint", &checkpoint, "--test", &data, "-k", "3", "--max-len", "10", "--by-length",
        "--verdicts", &verdicts.to_string_lossy(), "--report", &report.to_string_lossy(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let dumped: Vec<serde_json::Value> =
        fs::read_to_string(&verdicts).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(dumped.len(), 40);
    assert_eq!(common::report_mismatches(&report, &common::recount(&dumped)), Vec::<String>::new());

    let bank = dir.path().join("bank.jsonl");
    let out = genrank(&[
        "bank", "--checkpoint", &checkpoint, "--data", &data, "-k", "3", "-b", "6", "--max-len", "10",
        "--out", &bank.to_string_lossy(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let records: Vec<serde_json::Value> =
        fs::read_to_string(&bank).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let truths = records.iter().filter(|r| r["provenance"] == "ground-truth").count();
    assert_eq!(truths, 40);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "train.jsonl", 24, 4);
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    assert!(train(&data, &full, &[]).status.success());
    let out = train(&data, &split, &["--halt-after", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(fs::read_to_string(split.join("train_log.jsonl")).unwrap().lines().count(), 3);
    let out = train(&data, &split, &["--resume"]);
    assert!(out.status.success(), "{}", stderr(&out));
    for file in ["checkpoint.json", "train_log.jsonl"] {
        assert_eq!(fs::read(full.join(file)).unwrap(), fs::read(split.join(file)).unwrap(), "{file}");
    }
    let out = train(&data, &split, &["--resume", "--beam-size", "2"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}
