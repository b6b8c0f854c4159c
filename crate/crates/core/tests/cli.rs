mod common;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_deep2shallow");

fn minimal_with(dir: &Path, patch: Value) -> PathBuf {
    let mut config: Value = serde_json::from_str(common::MINIMAL_CONFIG).unwrap();
    merge(&mut config, &patch);
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .env_remove("D2S_OUTPUT_ROOT")
        .output()
        .unwrap()
}

fn files_under(root: &Path) -> BTreeSet<PathBuf> {
    walk(root).into_iter().map(|p| p.strip_prefix(root).unwrap().to_path_buf()).collect()
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

#[test]
fn minimal_erm_run_writes_one_summary_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = minimal_with(dir.path(), json!({"output_dir": "out"}));
    let out = run(&["run", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("erm,1,"));
    let files = files_under(&dir.path().join("out"));
    for f in ["metrics.jsonl", "group_metrics.json", "checkpoint.json", "clustering.json"] {
        assert!(files.contains(&PathBuf::from("erm/seed0").join(f)), "missing {f}: {files:?}");
    }
    let metrics = std::fs::read_to_string(dir.path().join("out/erm/seed0/metrics.jsonl")).unwrap();
    let first: Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in ["epoch", "l_ace", "l_akd", "l_kl", "l_hybrid", "val_unbiased_acc", "val_worst_group_acc", "K_per_class"] {
        assert!(first.get(key).is_some(), "metrics line lacks {key}");
    }
    let ck = deep2shallow::trainer::load_checkpoint(&dir.path().join("out/erm/seed0/checkpoint.json")).unwrap();
    assert_eq!(ck.train.mode, deep2shallow::trainer::TrainMode::Erm);
}

#[test]
fn validation_failures_exit_with_2_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = minimal_with(dir.path(), json!({"train": {"learning_rate": -0.5}}));
    let out = run(&["run", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.learning_rate"));
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1, "nothing may be written");
}

#[test]
fn unknown_keys_exit_with_2_and_a_position() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\n  \"comparisons\": [\"erm\"],\n  \"trian\": {}\n}\n").unwrap();
    let out = run(&["run", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("trian") && err.contains("line 3"), "{err}");
}

#[test]
fn runtime_failures_exit_with_3_and_the_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = minimal_with(dir.path(), json!({"output_dir": "out", "train": {"learning_rate": 1e300, "weight_decay": 0.0}}));
    let out = run(&["run", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite loss"));
}

#[test]
fn reruns_are_byte_identical_and_stay_inside_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let patch = json!({"comparisons": ["erm", "debiasify"], "seeds": [0, 1], "eval": {"probe": true}});
    let cfg = minimal_with(dir.path(), patch);
    let mut written = Vec::new();
    for (name, jobs) in [("a", "1"), ("b", "2")] {
        let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
        v["output_dir"] = json!(name);
        let p = dir.path().join(format!("{name}.json"));
        std::fs::write(&p, v.to_string()).unwrap();
        let out = run(&["run", "--config", p.to_str().unwrap(), "--jobs", jobs], dir.path());
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        written.push(dir.path().join(name));
    }
    let top: BTreeSet<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    let expected: BTreeSet<String> = ["a", "b", "a.json", "b.json", "config.json"].iter().map(|s| s.to_string()).collect();
    assert_eq!(top, expected);

    let files = files_under(&written[0]);
    assert_eq!(files, files_under(&written[1]));
    for f in &files {
        let name = f.file_name().unwrap().to_string_lossy();
        if name == "timing.json" || name == "config.resolved.json" {
            continue;
        }
        let x = std::fs::read(written[0].join(f)).unwrap();
        let y = std::fs::read(written[1].join(f)).unwrap();
        assert!(x == y, "{} differs between runs", f.display());
    }
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = minimal_with(dir.path(), json!({}));
    let out = Command::new(BIN)
        .args(["run", "--config", cfg.to_str().unwrap(), "--seed-override", "7"])
        .current_dir(dir.path())
        .env("D2S_OUTPUT_ROOT", dir.path().join("root"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let runs = std::fs::read_to_string(dir.path().join("root/config/runs.csv")).unwrap();
    assert!(runs.lines().nth(1).unwrap().starts_with("erm,7,"), "{runs}");
    assert!(dir.path().join("root/config/erm/seed7/metrics.jsonl").exists());
}

#[test]
fn sweeps_get_isolated_directories_and_shared_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = minimal_with(dir.path(), json!({"output_dir": "sweep", "comparisons": ["debiasify"], "seeds": [3]}));
    let out = run(
        &["sweep", "--config", cfg.to_str().unwrap(), "--axis", "alpha", "--values", "0,0.5"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let root = dir.path().join("sweep");
    for v in ["alpha=0", "alpha=0.5"] {
        assert!(root.join(v).join("debiasify/seed3/metrics.jsonl").exists(), "{v}");
    }
    // α = 0 leaves only the two-head and KL terms.
    let metrics = std::fs::read_to_string(root.join("alpha=0/debiasify/seed3/metrics.jsonl")).unwrap();
    for line in metrics.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        let sum = v["l_ace"].as_f64().unwrap() + v["l_kl"].as_f64().unwrap();
        assert!((v["l_hybrid"].as_f64().unwrap() - sum).abs() < 1e-12);
    }
    let table = std::fs::read_to_string(root.join("sweep_summary.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn fixed_k_sweep_sets_every_class() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = minimal_with(dir.path(), json!({"output_dir": "sweep", "comparisons": ["debiasify"]}));
    let out = run(
        &["sweep", "--config", cfg.to_str().unwrap(), "--axis", "fixed_K", "--values", "2,4"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for k in [2, 4] {
        let m = std::fs::read_to_string(dir.path().join(format!("sweep/fixed_K={k}/debiasify/seed0/metrics.jsonl"))).unwrap();
        let last: Value = serde_json::from_str(m.lines().last().unwrap()).unwrap();
        assert_eq!(last["K_per_class"], json!([k, k]));
    }
}

#[test]
fn unknown_axis_and_bad_values_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = minimal_with(dir.path(), json!({}));
    let c = cfg.to_str().unwrap();
    let out = run(&["sweep", "--config", c, "--axis", "depth", "--values", "1,2"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("depth"));
    let out = run(&["sweep", "--config", c, "--axis", "shallow_tap_block", "--values", "1,4"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}
