mod common;

use std::process::Command;

use common::{mdd, run_pipeline, snapshot, write_config};

#[test]
fn full_pipeline_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (stage, code) in run_pipeline(a.path()).into_iter().chain(run_pipeline(b.path())) {
        assert_eq!(code, 0, "stage {stage} failed");
    }
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (name, bytes) in &sa {
        assert!(bytes == &sb[name], "{name} differs between runs");
    }
    for expected in ["vq.mvq.run.json", "den.mdn.loss.csv", "eval.json", "gen.tokens.json", "data/run.json"] {
        assert!(sa.contains_key(expected), "missing {expected}");
    }
    let tokens: Vec<u32> = serde_json::from_slice(&sa["gen.tokens.json"]).unwrap();
    assert_eq!(tokens.len(), 12);
    let eval: serde_json::Value = serde_json::from_slice(&sa["eval.json"]).unwrap();
    assert!(eval["fid"].as_f64().unwrap().is_finite());
}

#[test]
fn missing_config_exits_one_and_names_the_path() {
    let out = Command::new(env!("CARGO_BIN_EXE_mdd"))
        .args(["make-synthetic", "--config", "/definitely/not/here.json", "--out", "/tmp/unused"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/definitely/not/here.json"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(mdd(&["no-such-stage"]), 1);
    assert_eq!(mdd(&["generate", "--vq", "a"]), 1);
    assert_eq!(mdd(&["make-synthetic", "--out", "/tmp/x", "--set", "bogus.key=1"]), 1);
}

#[test]
fn missing_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(mdd(&["train-vq", "--data", d, "--out", &format!("{d}/vq.mvq")]), 2);
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let c = cfg.to_str().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    assert_eq!(mdd(&["make-synthetic", "--config", c, "--out", &p("raw")]), 0);
    assert_eq!(mdd(&["preprocess", "--config", c, "--input", &p("raw"), "--output", &p("data")]), 0);
    let code = mdd(&[
        "train-vq", "--config", c, "--data", &p("data"), "--out", &p("vq.mvq"),
        "--set", "vq.optimizer.learning_rate=1e300",
    ]);
    assert_eq!(code, 3);
}

#[test]
fn filter_reports_removals_and_keeps_motions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let c = cfg.to_str().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    assert_eq!(mdd(&["make-synthetic", "--config", c, "--out", &p("raw")]), 0);
    assert_eq!(mdd(&["preprocess", "--config", c, "--input", &p("raw"), "--output", &p("data")]), 0);
    assert_eq!(mdd(&["filter-captions", "--config", c, "--data", &p("data"), "--tau", "0", "--out", &p("f.jsonl")]), 0);
    let m = mdd_core::corpus::DatasetManifest::load(&dir.path().join("f.jsonl")).unwrap();
    assert_eq!(m.records.len(), 24);
    assert!(m.records.iter().all(|r| r.uncaptioned && r.captions.is_empty()));
}
