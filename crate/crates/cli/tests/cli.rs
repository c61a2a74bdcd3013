use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = r#"{
  "dataset": {"kind": "synth", "spec": {"shapes": ["square", "ellipse", "cross"], "scales": [4.0, 7.0], "x_positions": 4, "y_positions": 4, "image_size": 32}},
  "model": {"architecture": "tiny-mlp", "input_shape": [32, 32], "layout": "concrete:3,normal:4", "likelihood": "bernoulli"},
  "objective": {"preset": "hfvae", "alpha": 1, "beta": 4, "gamma": 3},
  "optimizer": {"lr": 0.003},
  "run": {"batch_size": 32, "epochs": 2, "seed": 1}
}"#;

fn hfvae(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hfvae"))
        .args(args)
        .current_dir(dir)
        .env("HFVAE_DATA_ROOT", dir.join("data"))
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.json"), SMALL).unwrap();
    dir
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn weights(m: &Value) -> Vec<f64> {
    ["w_mi", "w_group_tc", "w_within_tc", "w_dim_kl"].iter().map(|k| m["weights"][k].as_f64().unwrap()).collect()
}

fn listed_paths(m: &Value) -> Vec<PathBuf> {
    let mut paths: Vec<PathBuf> = m["config"].as_str().map(PathBuf::from).into_iter().collect();
    for key in ["checkpoints", "reports", "plots"] {
        paths.extend(m[key].as_array().unwrap().iter().map(|p| PathBuf::from(p.as_str().unwrap())));
    }
    paths
}

#[test]
fn preset_flags_set_the_term_weights() {
    let ws = workspace();
    let dir = ws.path();
    let out = hfvae(dir, &["train", "--config", "small.json", "--out", "hf", "--alpha", "1", "--beta", "5", "--gamma", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(weights(&manifest(&dir.join("hf"))), vec![1.0, 5.0, 3.0, 1.0]);

    let out = hfvae(dir, &["train", "--config", "small.json", "--out", "bv", "--preset", "beta-vae", "--beta", "8"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(weights(&manifest(&dir.join("bv"))), vec![8.0; 4]);
}

#[test]
fn same_seed_gives_identical_logs_and_manifest_paths_exist() {
    let ws = workspace();
    let dir = ws.path();
    for run in ["a", "b"] {
        let out = hfvae(dir, &["train", "--config", "small.json", "--out", run, "--seed", "7"]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let a = std::fs::read(dir.join("a/metrics.csv")).unwrap();
    assert_eq!(a, std::fs::read(dir.join("b/metrics.csv")).unwrap());
    let (ma, mb) = (manifest(&dir.join("a")), manifest(&dir.join("b")));
    assert_eq!(ma["config_hash"], mb["config_hash"]);
    assert_eq!(ma["run_id"], mb["run_id"]);
    let paths = listed_paths(&ma);
    assert!(paths.len() >= 5);
    for p in paths {
        assert!(dir.join(&p).exists(), "{}", p.display());
    }
}

#[test]
fn report_traverse_and_their_usage_errors() {
    let ws = workspace();
    let dir = ws.path();
    assert!(hfvae(dir, &["train", "--config", "small.json", "--out", "run", "--no-plots"]).status.success());

    let out = hfvae(dir, &["report", "--checkpoint", "run/last.ckpt", "--metrics", "data-mi,mig,tc", "--out", "rep"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("rep/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["records"].as_array().unwrap().len(), 3);
    for p in listed_paths(&manifest(&dir.join("rep"))) {
        assert!(dir.join(&p).exists(), "{}", p.display());
    }

    let out = hfvae(dir, &["report", "--checkpoint", "run/last.ckpt", "--metrics", "mig,bogus", "--out", "rep2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("data-mi, mig, kim, eastwood, tc"), "{}", stderr(&out));

    let out = hfvae(dir, &["traverse", "--checkpoint", "run/last.ckpt", "--dim", "1", "--steps", "5", "--out", "t.png"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let img = image::open(dir.join("t.png")).unwrap();
    // 2-pixel gutters around each 32×32 frame.
    assert_eq!((img.width(), img.height()), (5 * 34 + 2, 34 + 2));

    let out = hfvae(dir, &["traverse", "--checkpoint", "run/last.ckpt", "--dim", "5", "--out", "t.png"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("out of range"));
}

#[test]
fn bad_inputs_exit_with_status_two() {
    let ws = workspace();
    let dir = ws.path();
    let out = hfvae(dir, &["train", "--config", "missing.json", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));

    let out = hfvae(dir, &["train", "--config", "small.json", "--set", "run.batch_size=0", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));

    let out = hfvae(dir, &["sweep", "--config", "small.json", "--param", "beta", "--values", "", "--out", "sw"]);
    assert_eq!(out.status.code(), Some(2));

    let out = hfvae(dir, &["sweep", "--config", "small.json", "--param", "delta", "--values", "1", "--out", "sw"]);
    assert_eq!(out.status.code(), Some(2));

    let args = ["prune-retrain", "--config", "small.json", "--factor-predicate", "shape=cross&scale=5", "--feature", "scale", "--out", "pr"];
    let out = hfvae(dir, &args);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn divergence_exits_with_status_three_naming_the_term() {
    let ws = workspace();
    let dir = ws.path();
    let out = hfvae(dir, &["train", "--config", "small.json", "--set", "optimizer.lr=1e300", "--out", "nan"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite value in term"));
}

#[test]
fn sweep_and_prune_retrain_write_their_artifacts() {
    let ws = workspace();
    let dir = ws.path();
    let args = ["sweep", "--config", "small.json", "--set", "run.epochs=1", "--param", "beta-gamma", "--values", "2,4", "--seeds", "2", "--out", "sw"];
    let out = hfvae(dir, &args);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = std::fs::read_to_string(dir.join("sw/sweep.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2 * 2);
    assert!(dir.join("sw/tc_vs_mi.svg").exists() && dir.join("sw/mig_vs_param.svg").exists());

    let args = ["prune-retrain", "--config", "small.json", "--factor-predicate", "shape=cross & scale=1", "--feature", "scale", "--out", "pr"];
    let out = hfvae(dir, &args);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("pr/prune_report.json")).unwrap()).unwrap();
    assert_eq!(report["heldout_size"], 16);
    assert_eq!(report["train_size"], 80);
    for p in listed_paths(&manifest(&dir.join("pr"))) {
        assert!(dir.join(&p).exists(), "{}", p.display());
    }
}
