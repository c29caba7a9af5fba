//! Runs the built binary: golden outputs, exit codes, end-to-end train and infer.
//!
//! Set `UPDATE_GOLDEN=1` to rewrite the files under `tests/golden/`.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn micronet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_micronet"))
        .args(args)
        .env_remove("MICRONET_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn repo() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn golden(name: &str, args: &[&str]) {
    let out = micronet(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    let got = stdout(&out);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &got).unwrap();
    }
    let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(got, want, "golden {name}");
}

#[test]
fn golden_analyze() {
    golden("analyze_m2.jsonl", &["analyze", "--model", "M2", "--format", "jsonl"]);
    golden("analyze_m0.txt", &["analyze", "--model", "M0"]);
}

#[test]
fn golden_sweep() {
    golden("sweep_108_r2.txt", &["sweep", "--budget", "108", "--reduction", "2"]);
    golden("sweep_108_r2.jsonl", &["sweep", "--budget", "108", "--reduction", "2", "--format", "jsonl"]);
    golden("sweep_324_r2.jsonl", &["sweep", "--budget", "324", "--reduction", "2", "--format", "jsonl"]);
}

#[test]
fn analyze_m2_is_within_budget() {
    let out = micronet(&["analyze", "--model", "M2", "--format", "jsonl"]);
    let last: serde_json::Value = serde_json::from_str(stdout(&out).lines().last().unwrap()).unwrap();
    let madds = last["madds"].as_f64().unwrap();
    assert!((madds / 12e6 - 1.0).abs() <= 0.10, "{madds}");
}

#[test]
fn analyze_accepts_config_files() {
    let path = repo().join("configs/m1.toml");
    let a = micronet(&["analyze", "--config", path.to_str().unwrap(), "--format", "jsonl"]);
    let b = micronet(&["analyze", "--model", "M1", "--format", "jsonl"]);
    assert!(a.status.success());
    assert_eq!(stdout(&a), stdout(&b));
}

#[test]
fn verify_fresh_variants() {
    for m in ["M0", "M1", "M2", "M3"] {
        let out = micronet(&["verify", "--model", m]);
        assert_eq!(out.status.code(), Some(0), "{m}: {}", stdout(&out));
    }
}

#[test]
fn verify_reports_rank_violations() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(repo().join("configs/micro.toml")).unwrap();
    let under = text.replace("lambda = 1.0", "lambda = 0.5");
    assert_ne!(text, under);
    let path = dir.path().join("under.toml");
    std::fs::write(&path, under).unwrap();
    let out = micronet(&["verify", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("FAIL"));
}

#[test]
fn exit_codes() {
    assert_eq!(micronet(&["analyze", "--model", "M0", "--bogus"]).status.code(), Some(2));
    assert_eq!(micronet(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(micronet(&["analyze", "--model", "M9"]).status.code(), Some(2));
    assert_eq!(micronet(&["analyze"]).status.code(), Some(2));
    assert_eq!(micronet(&["bench", "--model", "M0", "--threads", "2"]).status.code(), Some(2));
    assert_eq!(micronet(&["infer", "--weights", "/nonexistent", "--image", "/nonexistent"]).status.code(), Some(3));
    assert_eq!(micronet(&["analyze", "--config", "/nonexistent.toml"]).status.code(), Some(3));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "name = [").unwrap();
    assert_eq!(micronet(&["analyze", "--config", bad.to_str().unwrap()]).status.code(), Some(4));
    let junk = dir.path().join("junk.mnw");
    std::fs::write(&junk, b"MNWT\x01\x00\x00\x00garbage").unwrap();
    assert_eq!(micronet(&["verify", "--weights", junk.to_str().unwrap()]).status.code(), Some(4));
}

fn train(dir: &Path, seed: &str) -> Vec<u8> {
    let data = dir.join("data");
    let out = Command::new(env!("CARGO_BIN_EXE_micronet"))
        .args(["synth", "--out", data.to_str().unwrap(), "--samples", "32"])
        .env("MICRONET_SEED", seed)
        .output()
        .unwrap();
    assert!(out.status.success());
    let cfg = repo().join("configs/train_micro.toml");
    let archive = dir.join("micro.mnw");
    let out = micronet(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        archive.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::read(archive).unwrap()
}

#[test]
fn train_then_infer_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let bytes = train(dir.path(), "4");
    let other = tempfile::tempdir().unwrap();
    assert_eq!(train(other.path(), "4"), bytes, "training is deterministic");

    let history = std::fs::read_to_string(dir.path().join("micro.mnw.history.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = history.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(records.len() >= 2);
    assert!(records.iter().all(|r| r["schema"] == "micronet.history/1"));
    assert!(records.last().unwrap()["accuracy"].as_f64().unwrap() >= 0.99);

    let archive = dir.path().join("micro.mnw");
    let images = dir.path().join("data/images.bin");
    let out = micronet(&[
        "infer",
        "--weights",
        archive.to_str().unwrap(),
        "--image",
        images.to_str().unwrap(),
        "--topk",
        "2",
        "--format",
        "jsonl",
    ]);
    assert!(out.status.success());
    let rows: Vec<serde_json::Value> = stdout(&out).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 32);
    for r in &rows {
        let scores: Vec<f64> = r["scores"].as_array().unwrap().iter().map(|s| s.as_f64().unwrap()).collect();
        assert_eq!(scores.len(), 2);
        assert!(scores[0] >= scores[1]);
        assert!((scores.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    assert_eq!(micronet(&["verify", "--weights", archive.to_str().unwrap()]).status.code(), Some(0));
    let out = micronet(&["bench", "--weights", archive.to_str().unwrap(), "--iters", "3", "--warmup", "1", "--format", "jsonl"]);
    let rec: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(rec["schema"], "micronet.bench/1");
    assert!(rec["median_ms"].as_f64().unwrap() > 0.0);
    assert!(rec["p95_ms"].as_f64().unwrap() >= rec["median_ms"].as_f64().unwrap());
}

#[test]
fn seed_env_changes_fresh_weights_only_through_the_seed() {
    let run = |seed: &str| {
        Command::new(env!("CARGO_BIN_EXE_micronet"))
            .args(["verify", "--model", "M0", "--format", "jsonl"])
            .env("MICRONET_SEED", seed)
            .output()
            .unwrap()
    };
    assert_eq!(run("7").stdout, run("7").stdout);
    assert_eq!(run("x").status.code(), Some(2));
}
