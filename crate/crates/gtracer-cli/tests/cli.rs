//! End-to-end checks of the `gtracer` binary.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gtracer"))
}

fn write_config(dir: &Path, out: &Path, epochs: usize, lr0: f64) -> std::path::PathBuf {
    let text = format!(
        r#"{{
            "schema_version": 1,
            "dataset": {{"name": "two_moons", "train_size": 64, "test_size": 32,
                        "noise": 0.2, "flip_fraction": 0.1, "seed": 7}},
            "model": {{"type": "mlp", "hidden": [8], "activation": "relu"}},
            "optimizer": {{"name": "sgd_tracer", "rho": 0.0001, "beta": 0.999,
                          "delta": 0.001, "momentum": 0.9}},
            "epochs": {epochs},
            "batch_size": 16,
            "schedule": {{"kind": "cosine", "lr0": {lr0}}},
            "output_dir": {out:?},
            "replicate_seeds": [1, 2]
        }}"#,
        out = out.display().to_string(),
    );
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn train_is_deterministic_and_artifacts_exist() {
    let dir = tempfile::tempdir().unwrap();
    let out1 = dir.path().join("out1");
    let out2 = dir.path().join("out2");
    let cfg1 = write_config(dir.path(), &out1, 3, 0.1);
    let status = bin().args(["train", "--config"]).arg(&cfg1).status().unwrap();
    assert!(status.success());

    let cfg2 = dir.path().join("config2.json");
    std::fs::write(
        &cfg2,
        std::fs::read_to_string(&cfg1)
            .unwrap()
            .replace(&out1.display().to_string(), &out2.display().to_string()),
    )
    .unwrap();
    let status = bin().args(["train", "--config"]).arg(&cfg2).status().unwrap();
    assert!(status.success());

    for seed in [1, 2] {
        let a = std::fs::read(out1.join(format!("run_{seed}/metrics.csv"))).unwrap();
        let b = std::fs::read(out2.join(format!("run_{seed}/metrics.csv"))).unwrap();
        assert_eq!(a, b, "metrics differ for seed {seed}");
        assert!(out1.join(format!("run_{seed}/checkpoint.bin")).exists());
        assert!(out1.join(format!("run_{seed}/summary.json")).exists());
    }
    assert!(out1.join("summary.json").exists());

    // compare renders the finished directories
    let out = bin().args(["compare", "--runs"]).arg(&out1).arg(&out2).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("sgd_tracer"));

    // diagnose runs on a produced checkpoint and emits JSON
    let out = bin()
        .args(["diagnose", "--config"])
        .arg(&cfg1)
        .args(["--checkpoint"])
        .arg(out1.join("run_1"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("hessian_trace"));
    assert!(out1.join("diagnostics.json").exists());
}

#[test]
fn divergent_training_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), &out, 60, 1e9);
    let status = bin().args(["train", "--config"]).arg(&cfg).status().unwrap();
    assert!(!status.success());
}

#[test]
fn sweep_emits_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), &out, 2, 0.1);
    let output = bin()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .args(["--param", "rho", "--values", "0,0.0001"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(text.starts_with("value,n,n_failed,mean_accuracy,std_error"));
    assert!(out.join("sweep.csv").exists());
}
