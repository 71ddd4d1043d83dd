//! Black-box tests of the `nashgen` binary.

use std::path::Path;
use std::process::Command;

fn nashgen() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nashgen"))
}

fn write_tiny_config(path: &Path) {
    std::fs::write(
        path,
        r#"
seed = 42

[dataset]
count = 60

[architecture]
heads = 2
embed_dim = 16
time_dim = 8
hidden = 32

[training]
epochs = 2
phase1_epochs = 1
batch_size = 16

[sampler]
steps = 5

[experiment]
jobs = 2
"#,
    )
    .unwrap();
}

#[test]
fn gen_data_writes_dataset_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let output = nashgen()
        .args(["gen-data", "--count", "50", "--seed", "7"])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");
    assert!(out.join("dataset.jsonl").exists());
    assert!(out.join("dataset.meta.json").exists());
    assert!(out.join("resolved_config.toml").exists());
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.contains("40/5/5"), "{stdout}");
}

#[test]
fn gen_data_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let status = nashgen()
            .args(["gen-data", "--count", "30", "--seed", "3"])
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    assert_eq!(
        std::fs::read(out_a.join("dataset.jsonl")).unwrap(),
        std::fs::read(out_b.join("dataset.jsonl")).unwrap()
    );
}

#[test]
fn train_then_evaluate_via_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    write_tiny_config(&config);

    let train_out = dir.path().join("train");
    let status = nashgen()
        .arg("train")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&train_out)
        .status()
        .unwrap();
    assert!(status.success());
    let ckpt = train_out.join("checkpoint.json");
    assert!(ckpt.exists());
    assert!(train_out.join("loss_log.csv").exists());

    let eval_out = dir.path().join("eval");
    let output = nashgen()
        .args(["evaluate", "--mode", "guided"])
        .arg("--config")
        .arg(&config)
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(&eval_out)
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");
    let metrics_raw = std::fs::read_to_string(eval_out.join("metrics.json")).unwrap();
    let metrics: serde_json::Value = serde_json::from_str(&metrics_raw).unwrap();
    for key in [
        "ir_compliance",
        "mean_nash_product",
        "nash_efficiency",
        "mean_frontier_distance",
    ] {
        assert!(metrics.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn sample_supports_counterfactual_flag() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    write_tiny_config(&config);
    let out = dir.path().join("samples");
    let status = nashgen()
        .args(["sample", "--mode", "guided", "--counterfactual-equalize-d"])
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let csv = std::fs::read_to_string(out.join("samples.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[3], cols[4], "d columns not equalized: {line}");
    }
}

#[test]
fn theory_suite_passes_on_defaults() {
    let output = nashgen().arg("theory").output().unwrap();
    assert!(output.status.success(), "{output:?}");
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert_eq!(stdout.matches("PASS").count(), 3, "{stdout}");
}

#[test]
fn version_prints_checkpoint_format_tag() {
    let output = nashgen().arg("version").output().unwrap();
    assert!(output.status.success());
    assert_eq!(
        String::from_utf8(output.stdout).unwrap().trim(),
        "nashgen-ckpt-v1"
    );
}

#[test]
fn unknown_config_key_fails_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "[guidance]\nnot_a_key = 1\n").unwrap();
    let output = nashgen()
        .arg("theory")
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8(output.stderr).unwrap();
    assert!(stderr.starts_with("error:"), "{stderr}");
    assert!(stderr.contains("not_a_key"), "{stderr}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let output = nashgen().args(["theory", "--frobnicate"]).output().unwrap();
    assert!(!output.status.success());
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn help_enumerates_config_keys_with_defaults() {
    let output = nashgen().arg("--help").output().unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8(output.stdout).unwrap();
    for key in [
        "lambda = 0.35",
        "t_start = 0.25",
        "delta = 0.05",
        "steps = 50",
        "clean_clip = 1.2",
        "drift_clamp = 1.5",
        "timesteps = 1000",
        "hidden = 256",
        "epochs = 30",
        "batch_size = 256",
    ] {
        assert!(stdout.contains(key), "help missing `{key}`");
    }
}

#[test]
fn grid_runs_on_a_small_custom_grid() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    write_tiny_config(&config);
    let out = dir.path().join("grid");
    let output = nashgen()
        .args([
            "grid",
            "--grid-lambda",
            "0.1,0.3",
            "--grid-t-start",
            "0.2,0.5",
            "--grid-steps",
            "10",
        ])
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");
    let grid = std::fs::read_to_string(out.join("grid.csv")).unwrap();
    assert_eq!(grid.trim_end().lines().count(), 1 + 4);
    assert!(out.join("sensitivity.csv").exists());
}
