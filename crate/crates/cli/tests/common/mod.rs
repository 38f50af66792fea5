use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// A configuration small enough to run the whole pipeline in seconds.
pub const TINY_CONFIG: &str = r#"{
  "seed": 3,
  "synthetic": { "motions": 24, "min_frames": 40, "max_frames": 60 },
  "split": { "ratios": [0.6, 0.1, 0.3], "batch_size": 8 },
  "text": { "seed": 0, "layers": [7, 9, 11, 12], "width": 16 },
  "vq": { "num_codes": 16, "code_dim": 8, "hidden": 32, "steps": 60, "batch_size": 4, "window": 32, "seed": 1 },
  "denoiser": {
    "hidden": 16, "cond_dim": 16, "blocks": 1, "radius": 1, "diffusion_steps": 10,
    "train": {
      "steps": 40, "batch_size": 8, "cosine_decay": true,
      "optimizer": { "kind": "adam", "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "learning_rate": 0.003, "weight_decay": 0.045 },
      "seed": 2
    }
  },
  "generate": { "scale": 2.0, "steps": 10, "seed": 4 },
  "evaluate": { "feature_dim": 16, "extractor_seed": 7, "runs": 2, "mm_texts": 2, "mm_subset": 2 },
  "filter": { "tau": 2.0 }
}"#;

pub fn mdd(args: &[&str]) -> i32 {
    let mut argv = vec!["mdd"];
    argv.extend_from_slice(args);
    mdd_cli::run(argv)
}

pub fn write_config(dir: &Path) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, TINY_CONFIG).unwrap();
    p
}

/// Runs every stage in `dir` and returns the exit code of each.
pub fn run_pipeline(dir: &Path) -> Vec<(&'static str, i32)> {
    let cfg = write_config(dir);
    let c = cfg.to_str().unwrap();
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
    let (raw, data, vq, den) = (p("raw"), p("data"), p("vq.mvq"), p("den.mdn"));
    vec![
        ("make-synthetic", mdd(&["make-synthetic", "--config", c, "--out", &raw])),
        ("preprocess", mdd(&["preprocess", "--config", c, "--input", &raw, "--output", &data])),
        ("filter-captions", mdd(&["filter-captions", "--config", c, "--data", &data, "--out", &p("data/filtered.jsonl")])),
        ("train-vq", mdd(&["train-vq", "--config", c, "--data", &data, "--out", &vq])),
        ("train-denoiser", mdd(&["train-denoiser", "--config", c, "--data", &data, "--vq", &vq, "--out", &den])),
        (
            "generate",
            mdd(&[
                "generate", "--config", c, "--vq", &vq, "--denoiser", &den, "--text", "a person jogs in a straight line",
                "--length", "48", "--out", &p("gen.mclp"), "--joints", &p("gen.jntm"), "--tokens", &p("gen.tokens.json"),
            ]),
        ),
        ("evaluate", mdd(&["evaluate", "--config", c, "--data", &data, "--vq", &vq, "--denoiser", &den, "--out", &p("eval.json")])),
    ]
}

/// Every file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}
