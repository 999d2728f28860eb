//! End-to-end CLI checks: determinism of emitted files, thread-count
//! independence, config-file parity with flags, and the exit-code contract.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_emascale"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn read_csv(dir: &Path, command: &str) -> (String, Vec<u8>) {
    let prefix = format!("{command}_");
    let mut paths: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(&prefix) && n.ends_with(".csv"))
        })
        .collect();
    assert_eq!(paths.len(), 1, "expected one {command} CSV in {dir:?}");
    let path = paths.remove(0);
    let name = path.file_name().unwrap().to_str().unwrap().to_string();
    let bytes = fs::read(&path).unwrap();
    (name, bytes)
}

#[test]
fn scale_prints_rules_and_echoes_at_kappa_one() {
    let out = run(&[
        "scale",
        "--optimizer",
        "sgd",
        "--base-batch",
        "256",
        "--lr",
        "0.1",
        "--target-batch",
        "1024",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("lr: 0.4"), "{text}");
    assert!(text.contains("linear rule"), "{text}");

    let out = run(&[
        "scale",
        "--optimizer",
        "adam",
        "--base-batch",
        "4096",
        "--rho",
        "0.99",
        "--target-batch",
        "32768",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("rho: 0.92274"), "{text}");

    let out = run(&[
        "scale",
        "--optimizer",
        "sgd",
        "--base-batch",
        "256",
        "--lr",
        "0.1",
        "--rho",
        "0.99",
        "--target-batch",
        "256",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("lr: 0.1") && text.contains("rho: 0.99"), "{text}");
}

#[test]
fn same_seed_gives_identical_bytes_and_threads_do_not_matter() {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    for (dir, threads) in dirs.iter().zip(["1", "1", "2"]) {
        let out = run(&[
            "parabola",
            "--kappa",
            "8",
            "--iterations",
            "2000",
            "--replicates",
            "200",
            "--seed",
            "42",
            "--threads",
            threads,
            "--output-dir",
            dir.path().to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{:?}", out);
    }
    let (name0, bytes0) = read_csv(dirs[0].path(), "parabola");
    for dir in &dirs[1..] {
        let (name, bytes) = read_csv(dir.path(), "parabola");
        assert_eq!(name, name0, "config hash must be stable");
        assert_eq!(bytes, bytes0, "output bytes must be identical");
    }
    let manifest0 = fs::read(dirs[0].path().join("manifest.json")).unwrap();
    let manifest1 = fs::read(dirs[1].path().join("manifest.json")).unwrap();
    assert_eq!(manifest0, manifest1);
}

#[test]
fn config_hash_changes_with_config_content_only() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let run_with = |dir: &Path, seed: &str| {
        let out = run(&[
            "distill",
            "--kappa",
            "4",
            "--iterations",
            "100",
            "--seed",
            seed,
            "--output-dir",
            dir.to_str().unwrap(),
        ]);
        assert!(out.status.success());
        read_csv(dir, "distill").0
    };
    let name_a = run_with(a.path(), "1");
    let name_b = run_with(b.path(), "2");
    assert_ne!(name_a, name_b, "seed is part of the hashed config");
}

#[test]
fn config_file_replaces_flags() {
    let flag_dir = tempfile::tempdir().unwrap();
    let cfg_dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "table",
        "--base-batch",
        "256",
        "--rho",
        "0.9999",
        "--paper-rounding",
        "--output-dir",
        flag_dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let cfg_path = cfg_dir.path().join("table.json");
    fs::write(
        &cfg_path,
        r#"{"optimizer":"sgd","base_batch":256,"lr":0.1,"rho":0.9999,"batch_sizes":[],"paper_rounding":true}"#,
    )
    .unwrap();
    let out = run(&[
        "table",
        "--config",
        cfg_path.to_str().unwrap(),
        "--output-dir",
        cfg_dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{:?}", out);
    let (name_flags, bytes_flags) = read_csv(flag_dir.path(), "table");
    let (name_cfg, bytes_cfg) = read_csv(cfg_dir.path(), "table");
    assert_eq!(name_flags, name_cfg);
    assert_eq!(bytes_flags, bytes_cfg);
    let table = String::from_utf8(bytes_flags).unwrap();
    // the 0.9999 momentum column of the reference table
    assert!(table.contains("2048,8,0.8,0.9992,"), "{table}");
}

#[test]
fn exit_codes_follow_the_contract() {
    // invalid flag value: usage error
    let out = run(&["scale", "--target-batch", "not-a-number"]);
    assert_eq!(out.status.code(), Some(2));

    // missing config file: config error
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "table",
        "--config",
        "/nonexistent/config.json",
        "--output-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    // out-of-range hyperparameter: config error
    let out = run(&["scale", "--rho", "1.5", "--target-batch", "512"]);
    assert_eq!(out.status.code(), Some(2));

    // unstable learning rate: numerical divergence
    let out = run(&[
        "distill",
        "--lr",
        "3.0",
        "--kappa",
        "1",
        "--iterations",
        "200",
        "--output-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{:?}", out);

    // too few replicates for the weak-error CI: insufficient samples
    let out = run(&[
        "sde-check",
        "--sigma0",
        "1.0",
        "--etas",
        "0.004,0.002",
        "--total-time",
        "0.25",
        "--replicates",
        "8",
        "--output-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4), "{:?}", out);
}
