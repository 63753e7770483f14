use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ebc_core::checkpoint::Checkpoint;
use ebc_core::config::ExperimentConfig;
use ebc_core::train::expected_class_fingerprint;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn ebc(args: &[&str], envs: &[(&str, &str)]) -> Run {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ebc"));
    cmd.args(args).env("RUST_LOG", "warn").env_remove("EBC_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn ok(args: &[&str]) -> Run {
    let r = ebc(args, &[]);
    assert_eq!(r.code, 0, "{args:?}\nstdout: {}\nstderr: {}", r.stdout, r.stderr);
    r
}

/// A 64-pixel synthetic dataset and a config file next to it.
struct Workspace {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
    config: PathBuf,
}

impl Workspace {
    fn new(epochs: usize) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().to_path_buf();
        let data = dir.join("data");
        ok(&[
            "synth", "--out", s(&data), "--train", "16", "--val", "4", "--test", "10", "--size", "64",
            "--max-people", "12", "--seed", "5",
        ]);
        let config = dir.join("config.json");
        let text = format!(
            r#"{{"data": {{"root": "data", "augment": {{"base_size": 64}}}}, "optim": {{"epochs": {epochs}, "batch_size": 4}}}}"#
        );
        fs::write(&config, text).unwrap();
        Workspace { _tmp: tmp, dir, config }
    }

    fn cfg(&self) -> &str {
        s(&self.config)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn train(&self, out: &str) -> PathBuf {
        let out = self.path(out);
        ok(&["train", "--config", self.cfg(), "--out", s(&out)]);
        out
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_reports_exit_codes() {
    let ws = Workspace::new(2);
    let r = ok(&["validate", "--config", ws.cfg()]);
    assert!(r.stdout.contains("ok"));

    let r = ebc(&["validate", "--set", "model.r=7"], &[]);
    assert_eq!(r.code, 1);
    assert!(r.stdout.contains("E010"), "{}", r.stdout);

    let empty = ws.path("empty");
    fs::create_dir_all(&empty).unwrap();
    let r = ebc(&["validate", "--config", ws.cfg(), "--set", &format!("data.root={}", s(&empty))], &[]);
    assert_eq!(r.code, 1);
    assert!(r.stdout.contains("E040"), "{}", r.stdout);
    assert!(r.stdout.contains(s(&empty.join("train.jsonl"))), "{}", r.stdout);

    let r = ebc(&["validate", "--set", "no.such.key=1"], &[]);
    assert_eq!(r.code, 1, "{}", r.stderr);
}

#[test]
fn training_is_reproducible() {
    let ws = Workspace::new(2);
    let a = ws.train("a");
    let b = ws.train("b");
    let log_a = fs::read_to_string(a.join("log.jsonl")).unwrap();
    assert_eq!(log_a.lines().count(), 2);
    assert_eq!(log_a, fs::read_to_string(b.join("log.jsonl")).unwrap());
    for name in ["best.json", "best.safetensors", "last.json", "last.safetensors"] {
        assert!(a.join(name).exists(), "{name}");
    }

    let c = ws.path("c");
    let r = ebc(&["train", "--config", ws.cfg(), "--out", s(&c)], &[("EBC_SEED", "99")]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_ne!(log_a, fs::read_to_string(c.join("log.jsonl")).unwrap());
}

#[test]
fn evaluate_writes_rows_and_refuses_other_policies() {
    let ws = Workspace::new(1);
    let run = ws.train("run");
    let ck = run.join("best");
    let csv = ws.path("eval.csv");
    let r = ok(&["evaluate", "--config", ws.cfg(), "--checkpoint", s(&ck), "--out", s(&csv)]);
    assert!(r.stdout.contains("images 10"), "{}", r.stdout);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 11);

    let r = ebc(&["evaluate", "--config", ws.cfg(), "--set", "bins.m=6", "--checkpoint", s(&ck)], &[]);
    assert_eq!(r.code, 1);
    let mut other = ExperimentConfig::from_file(&ws.config).unwrap();
    other.apply_override("bins.m=6").unwrap();
    let stored = Checkpoint::load(&ck).unwrap().meta.class_fingerprint;
    let expected = expected_class_fingerprint(&other).unwrap();
    assert!(r.stderr.contains(&stored) && r.stderr.contains(&expected), "{}", r.stderr);
}

fn printed_count(stdout: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("count "))
        .expect("count line")
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn predict_round_trips_and_zero_projection_is_uniform() {
    let ws = Workspace::new(1);
    let run = ws.train("run");
    let image = ws.path("data/images/test_0000.png");
    let map = ws.path("density.txt");
    let png = ws.path("density.png");
    let r = ok(&[
        "predict", "--checkpoint", s(&run.join("last")), "--image", s(&image), "--out", s(&map), "--png", s(&png),
    ]);
    let count = printed_count(&r.stdout);
    let text = fs::read_to_string(&map).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("8 8 8"));
    let resum: f64 = lines.flat_map(|l| l.split_whitespace()).map(|t| t.parse::<f64>().unwrap()).sum();
    assert!((count - resum).abs() < 1e-6, "{count} vs {resum}");
    assert!(png.exists());

    // with a zero projection every logit ties, so each block predicts the mean representative
    let mut ck = Checkpoint::load(&run.join("last")).unwrap();
    ck.params.tensor_mut("projection.weight").fill(0.0);
    ck.params.tensor_mut("projection.bias").fill(0.0);
    ck.save(&ws.dir, "zero").unwrap();
    let r = ok(&["predict", "--checkpoint", s(&ws.path("zero")), "--image", s(&image), "--out", s(&map)]);
    let reps = &ck.meta.representatives;
    let mean = reps.iter().sum::<f64>() / reps.len() as f64;
    let count = printed_count(&r.stdout);
    assert!((count - mean * 64.0).abs() < 1e-9 * mean * 64.0, "{count} vs {}", mean * 64.0);
    let text = fs::read_to_string(&map).unwrap();
    let values: Vec<f64> = text.lines().skip(1).flat_map(|l| l.split_whitespace()).map(|t| t.parse().unwrap()).collect();
    assert!(values.iter().all(|v| (v - values[0]).abs() < 1e-12));

    let r = ebc(&["predict", "--checkpoint", s(&run.join("last")), "--image", s(&ws.path("nope.png")), "--out", s(&map)], &[]);
    assert_eq!(r.code, 2);
}

fn csv_hashes(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().to_string())
        .collect()
}

#[test]
fn ablation_grids_resume_without_duplicates() {
    let ws = Workspace::new(1);
    let one = ws.path("one.json");
    fs::write(&one, r#"{"base_config": "config.json", "cells": [{"label": "only"}]}"#).unwrap();
    let csv1 = ws.path("one.csv");
    ok(&["ablate", "--grid", s(&one), "--out", s(&csv1), "--work-dir", s(&ws.path("work"))]);
    let header = fs::read_to_string(&csv1).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "config_hash,granularity,m,lambda,r,head,bin_mode,mae,rmse,n_images,wall_seconds");
    assert_eq!(csv_hashes(&csv1).len(), 1);

    // a partial run followed by the full grid stands in for an interrupted run
    let partial = ws.path("partial.json");
    fs::write(&partial, r#"{"base_config": "config.json", "axes": {"lambda": [0, 1]}}"#).unwrap();
    let full = ws.path("full.json");
    fs::write(&full, r#"{"base_config": "config.json", "axes": {"lambda": [0, 0.01, 0.1, 1, 2]}}"#).unwrap();
    let csv = ws.path("lambda.csv");
    let work = ws.path("work");
    ok(&["ablate", "--grid", s(&partial), "--out", s(&csv), "--work-dir", s(&work)]);
    assert_eq!(csv_hashes(&csv).len(), 2);
    let r = ok(&["ablate", "--grid", s(&full), "--out", s(&csv), "--work-dir", s(&work)]);
    assert!(r.stdout.contains("ran 3, skipped 2"), "{}", r.stdout);
    let hashes = csv_hashes(&csv);
    assert_eq!(hashes.len(), 5);
    assert!(hashes.windows(2).all(|p| p[0] < p[1]));
    let r = ok(&["ablate", "--grid", s(&full), "--out", s(&csv), "--work-dir", s(&work)]);
    assert!(r.stdout.contains("ran 0, skipped 5"), "{}", r.stdout);
    assert_eq!(csv_hashes(&csv), hashes);
}

#[test]
fn prompt_and_bin_listings() {
    let r = ok(&["prompts", "dump"]);
    assert_eq!(
        r.stdout,
        "There is 0 person\nThere is 1 person\nThere are 2 people\nThere are 3 people\nThere are more than 4 people\n"
    );
    let r = ok(&["prompts", "dump", "--set", "bins.granularity=\"coarse\""]);
    assert_eq!(r.stdout.lines().nth(1), Some("There are between 1 and 2 people"));
    let r = ok(&["bins", "show"]);
    assert!(r.stdout.contains("fingerprint "), "{}", r.stdout);
    let r = ok(&["bins", "show", "--set", "bins.mode=continuous"]);
    assert!(r.stdout.contains("continuous"), "{}", r.stdout);
    let r = ebc(&["bins", "show", "--set", "bins.m=0"], &[]);
    assert_eq!(r.code, 1);
}
