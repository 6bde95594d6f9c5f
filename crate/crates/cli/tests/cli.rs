use std::path::Path;
use std::process::{Command, Output};

use latentcatch::suite::generate_free_suite;
use latentcatch::SuiteConfig;
use serde_json::json;

fn bin(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latentcatch"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, v: serde_json::Value) {
    std::fs::write(dir.join(name), v.to_string()).unwrap();
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

/// gen-data, embed and build-graph on a small dataset.
fn artifacts(dir: &Path) {
    write(dir, "gen.json", json!({"n": 800}));
    write(dir, "emb.json", json!({"dataset": "ds.csv"}));
    write(dir, "graph.json", json!({"dataset": "ds.csv", "embedding": "emb.csv"}));
    for args in [
        ["gen-data", "--config", "gen.json", "--seed", "5", "--out", "ds.csv"],
        ["embed", "--config", "emb.json", "--seed", "0", "--out", "emb.csv"],
        ["build-graph", "--config", "graph.json", "--seed", "0", "--out", "graph.jsonl"],
    ] {
        let o = bin(&args, dir);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    artifacts(dir);
    write(
        dir,
        "train.json",
        json!({"dataset": "ds.csv", "embedding": "emb.csv", "hyper": {"epochs": 5}}),
    );
    let o = bin(&["train-decoder", "--config", "train.json", "--seed", "1", "--out", "dec.json"], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let artifacts = json!({"dataset": "ds.csv", "embedding": "emb.csv", "graph": "graph.jsonl", "decoder": "dec.json"});
    let (sc, rc) = generate_free_suite(&SuiteConfig { count: 1, ..SuiteConfig::default() }).remove(0);
    write(dir, "run.json", json!({"artifacts": artifacts, "scenario": sc, "runner": rc}));
    let o = bin(&["run", "--config", "run.json", "--seed", "9", "--out", "trace.csv"], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let trace = std::fs::read_to_string(dir.join("trace.csv")).unwrap();
    assert!(trace.starts_with("# latentcatch trace v1"));
    assert!(trace.contains("# seed=9"));
    let stdout: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(stdout["metrics"]["triggered"].as_bool().unwrap());

    write(dir, "batch.json", json!({"artifacts": artifacts, "suite": {"count": 2}}));
    for out in ["a", "b"] {
        let o = bin(&["batch", "--config", "batch.json", "--seed", "3", "--out", out], dir);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["trace_000.csv", "trace_001.csv", "metrics.csv", "summary.json"] {
        let a = std::fs::read(dir.join("a").join(f)).unwrap();
        let b = std::fs::read(dir.join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical batches");
    }
}

#[test]
fn config_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(dir, "emb.json", json!({"dataset": "missing.csv"}));
    assert_eq!(code(&bin(&["embed", "--config", "emb.json", "--out", "e.csv"], dir)), 2);
    std::fs::write(dir.join("bad.json"), "{not json").unwrap();
    assert_eq!(code(&bin(&["gen-data", "--config", "bad.json", "--out", "d.csv"], dir)), 2);
    assert_eq!(code(&bin(&["embed", "--out", "e.csv"], dir)), 2);
    // unknown flag: usage error
    assert_eq!(code(&bin(&["run", "--bogus"], dir)), 2);
}

#[test]
fn mismatched_artifacts_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    artifacts(dir);
    write(dir, "gen2.json", json!({"n": 300}));
    assert_eq!(code(&bin(&["gen-data", "--config", "gen2.json", "--seed", "6", "--out", "ds2.csv"], dir)), 0);
    write(dir, "graph2.json", json!({"dataset": "ds2.csv", "embedding": "emb.csv"}));
    assert_eq!(code(&bin(&["build-graph", "--config", "graph2.json", "--out", "g2.jsonl"], dir)), 2);
}

#[test]
fn divergent_training_exits_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    artifacts(dir);
    write(
        dir,
        "train.json",
        json!({"dataset": "ds.csv", "embedding": "emb.csv", "hyper": {"epochs": 20, "learning_rate": 1e6}}),
    );
    let o = bin(&["train-decoder", "--config", "train.json", "--out", "dec.json"], dir);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}
