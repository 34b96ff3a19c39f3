use std::fs;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pnc"))
}

fn tiny_config(dir: &std::path::Path, method: &str) -> std::path::PathBuf {
    let path = dir.join("config.json");
    let body = format!(
        r#"{{
  "data": {{"source": "synthetic", "family": "sin_sum", "dim": 2, "noise_sd": 0.001}},
  "n": 8,
  "width_factor": 16,
  "train": {{"ridge": 1e-10, "learning_rate": 10.0, "epochs": 150}},
  "method": {method},
  "levels": [0.95],
  "repetitions": 3,
  "x0": [0.1, 0.1],
  "master_seed": 7,
  "seeds": 2,
  "test_size": 32
}}"#
    );
    fs::write(&path, body).unwrap();
    path
}

#[test]
fn coverage_is_deterministic_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), r#"{"name": "batching", "m_prime": 2}"#);
    let out1 = dir.path().join("r1.json");
    let out2 = dir.path().join("r2.json");
    for out in [&out1, &out2] {
        let status = bin()
            .args(["coverage", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .args(["--seed", "42"])
            .status()
            .unwrap();
        assert!(status.success());
    }
    assert_eq!(fs::read(&out1).unwrap(), fs::read(&out2).unwrap());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&out1).unwrap()).unwrap();
    assert_eq!(report["config"]["master_seed"], 42);
    let cr = report["levels"][0]["cr"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&cr));
}

#[test]
fn ci_subcommands_emit_interval_schema() {
    let dir = tempfile::tempdir().unwrap();
    for (sub, method) in [
        ("ci-batch", r#"{"name": "batching", "m_prime": 2}"#),
        ("ci-boot", r#"{"name": "cheap_bootstrap", "replications": 2}"#),
        ("ci-ij", r#"{"name": "infinitesimal_jackknife"}"#),
    ] {
        let cfg = tiny_config(dir.path(), method);
        let out = dir.path().join(format!("{sub}.json"));
        let status = bin()
            .arg(sub)
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success(), "{sub} failed");
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
        for key in ["method", "level", "center", "half_width", "df", "scale", "replications"] {
            assert!(v.get(key).is_some(), "{sub}: missing {key}");
        }
    }
}

#[test]
fn bad_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{\"n\": 0}").unwrap();
    let status = bin()
        .args(["coverage", "--config"])
        .arg(&cfg)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn validation_error_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    // x0 has the wrong dimension
    let cfg = dir.path().join("bad.json");
    fs::write(
        &cfg,
        r#"{
  "data": {"source": "synthetic", "family": "sin_sum", "dim": 2, "noise_sd": 0.001},
  "n": 8,
  "train": {"ridge": 1e-10, "learning_rate": 10.0, "epochs": 50},
  "method": {"name": "batching", "m_prime": 2},
  "x0": [0.1],
  "master_seed": 7
}"#,
    )
    .unwrap();
    let status = bin().args(["pnc", "--config"]).arg(&cfg).status().unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn divergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("diverge.json");
    fs::write(
        &cfg,
        r#"{
  "data": {"source": "synthetic", "family": "sin_sum", "dim": 2, "noise_sd": 0.001},
  "n": 8,
  "width_factor": 32,
  "train": {"ridge": 1e-10, "learning_rate": 1e6, "epochs": 500},
  "method": {"name": "batching", "m_prime": 2},
  "x0": [0.1, 0.1],
  "master_seed": 7
}"#,
    )
    .unwrap();
    let status = bin().args(["pnc", "--config"]).arg(&cfg).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn train_writes_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), r#"{"name": "batching", "m_prime": 2}"#);
    let out = dir.path().join("ckpt.json");
    let status = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert!(v.get("config").is_some() && v.get("params").is_some());
}
