use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn head(src: &Path, dst: &Path, rows: usize) {
    let text = fs::read_to_string(src).unwrap();
    let lines: Vec<&str> = text.lines().take(rows + 1).collect();
    fs::write(dst, lines.join("\n") + "\n").unwrap();
}

fn molvae() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_molvae"));
    c.env("RUST_LOG", "warn");
    c
}

fn toy_config(dir: &Path) -> PathBuf {
    let src = dir.join("source.csv");
    let tgt = dir.join("target.csv");
    head(&data("zinc_desk_25k.csv"), &src, 200);
    head(&data("logs.csv"), &tgt, 120);
    let cfg = serde_json::json!({
        "name": "toy",
        "output_dir": dir.join("runs"),
        "seed": 3,
        "source": {"path": src, "validation_size": 20},
        "target": {"path": tgt},
        "vae": {"arch": "PVAE", "preset": "desk", "latent_dim": 8, "hidden_dim": 16},
        "train": {"epochs": 2, "batch_size": 32},
        "selection": {"mode": "explicit", "names": ["MolLogP"]},
        "replicate_seeds": [0],
        "folds": 5
    });
    let path = dir.join("toy.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn missing_config_exits_with_code_2() {
    let out = molvae()
        .args(["train-vae", "--config", "/nonexistent/config.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/config.json"));
}

#[test]
fn missing_input_file_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let out = molvae()
        .args(["train-vae", "--config", cfg.to_str().unwrap(), "--set", "source.path=/nope.csv"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nope.csv"));
}

#[test]
fn toy_training_is_fast_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let start = Instant::now();
    let run = |out_dir: &Path| {
        let out = molvae()
            .args(["train-vae", "--config", cfg.to_str().unwrap(), "--output-dir", out_dir.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        let key = v["model_key"].as_str().unwrap().to_string();
        let params = fs::read(out_dir.join("models").join(&key).join("params.bin")).unwrap();
        (key, params)
    };
    let (k1, p1) = run(&dir.path().join("a"));
    assert!(start.elapsed().as_secs() < 60);
    let (k2, p2) = run(&dir.path().join("b"));
    assert_eq!(k1, k2);
    assert_eq!(p1, p2);
}

#[test]
fn toy_pipeline_reruns_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let run = || {
        let out = molvae()
            .args(["pipeline", "--config", cfg.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        fs::read(dir.path().join("runs/toy/pipeline_report.json")).unwrap()
    };
    let first = run();
    // Drop the model cache so the rerun retrains from scratch.
    fs::remove_dir_all(dir.path().join("runs/models")).unwrap();
    let second = run();
    assert_eq!(first, second);
    let v: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(v["command"], "pipeline");
    assert!(v["result"]["delta"]["LR"]["r2"].is_number());
    assert!(v["inputs"].as_array().unwrap().iter().all(|d| d["sha256"].as_str().unwrap().len() == 64));
}

#[test]
fn embed_and_train_qsar_verbs_work_on_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let out = molvae()
        .args(["train-vae", "--config", cfg.to_str().unwrap(), "--set", "variant=\"plain\""])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let bundle = v["bundle"].as_str().unwrap();
    let emb = dir.path().join("emb.csv");
    let tgt = dir.path().join("target.csv");
    let out = molvae()
        .args(["embed", "--bundle", bundle, "--input", tgt.to_str().unwrap(), "--output", emb.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let qsar_dir = dir.path().join("qsar");
    let out = molvae()
        .args([
            "train-qsar",
            "--embeddings",
            emb.to_str().unwrap(),
            "--target",
            tgt.to_str().unwrap(),
            "--folds",
            "5",
            "--output",
            qsar_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let oof = fs::read_to_string(qsar_dir.join("oof.csv")).unwrap();
    assert!(oof.starts_with("smiles,y_true,y_pred,fold"));
}
