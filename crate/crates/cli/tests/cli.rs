use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mango(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mango")).args(args).output().expect("spawn mango")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL: &str = "[task]\nnum_instances = 3\n\n[attack]\nsteps = 20\n";

#[test]
fn attack_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = mango(&["attack", "--config", &cfg, "--variant", "naive", "--seed", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["variant"], "naive");
    assert_eq!(manifest["config"]["seed"], 3);
    assert_eq!(manifest["metrics"]["instances"], 3);
    assert_eq!(fs::read_to_string(out.join("results.jsonl")).unwrap().lines().count(), 3);
    for i in 0..3 {
        assert!(out.join(format!("trace_{i}.csv")).is_file());
    }
}

#[test]
fn same_seed_gives_identical_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o =
            mango(&["attack", "--config", &cfg, "--variant", "gray", "--seed", "7", "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
    }
    assert_eq!(fs::read(a.join("results.jsonl")).unwrap(), fs::read(b.join("results.jsonl")).unwrap());
}

#[test]
fn gap_trace_and_compare_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("gap");
    let o = mango(&["gap-trace", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(out.join("gap_0.csv").is_file());
    assert!(out.join("manifest.json").is_file());

    let o = mango(&["gap-trace", "--config", &cfg, "--variant", "gray", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let out = dir.path().join("cmp");
    let o = mango(&["compare", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("compare.json")).unwrap()).unwrap();
    assert_eq!(report["pairs"].as_array().unwrap().len(), 3);
    assert!(out.join("mango/results.jsonl").is_file() && out.join("naive/results.jsonl").is_file());
}

#[test]
fn verification_exit_codes() {
    let o = mango(&["gradcheck", "--cases", "4"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("gradcheck: ok"));

    let o = mango(&["gradcheck", "--cases", "4", "--tolerance", "1e-30"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));

    let dir = tempfile::tempdir().unwrap();
    let o = mango(&["zoo-check", "--cases", "3", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("INFO") || stdout.matches("PASS").count() == 3);
    assert!(dir.path().join("zoo-check.json").is_file());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    for body in ["[attack]\nunknown_key = 1\n", "[optimizer]\nlr = -1.0\n", "[task]\nvocab_size = 1\n", "not toml ["] {
        let cfg = write_config(dir.path(), body);
        let o = mango(&["attack", "--config", &cfg, "--out", out]);
        assert_eq!(o.status.code(), Some(2), "{body}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let missing = dir.path().join("missing.toml");
    let o = mango(&["attack", "--config", missing.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    let o = mango(&["attack", "--variant", "bogus", "--out", out]);
    assert_eq!(o.status.code(), Some(2));
}
