//! End-to-end checks of the command-line surface and its exit codes.

use std::path::{Path, PathBuf};
use std::process::Command;

fn workdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("grass_cli").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, dataset: &str, extra: &str) -> PathBuf {
    let out = dir.join("artifacts");
    let config = format!(
        r#"{{
  "model": {{
    "n_layers": 2, "d_model": 8, "n_heads": 2, "d_ff": 16,
    "vocab_size": 17, "max_seq_len": 16, "attn_window": 3
  }},
  "optimizer": {{ "learning_rate": 0.001, "beta1": 0.9, "beta2": 0.999,
                  "epsilon": 1e-8, "weight_decay": 0.0 }},
  "grass": {{ "probe_steps": 4, "sample_period": 2, "prob_update_period": 2,
              "active_layers": 1, "temperature": 0.5, "ema_alpha": 0.5,
              "normalize_mgn": true, "rng_seed": 0 }},
  "method": "grass",
  "dataset": {dataset},
  "total_steps": 12,
  "batch_size": 2,
  "seq_len": 12,
  "seed": 5,
  "output_dir": {out_dir:?}
  {extra}
}}"#,
        dataset = dataset,
        out_dir = out.display().to_string(),
        extra = extra,
    );
    let path = dir.join("config.json");
    std::fs::write(&path, config).unwrap();
    path
}

fn grass() -> Command {
    Command::new(env!("CARGO_BIN_EXE_grass"))
}

#[test]
fn run_produces_artifacts_and_exit_zero() {
    let dir = workdir("run_ok");
    let cfg = write_config(&dir, r#"{ "kind": "repetition", "vocab": 4, "period": 4 }"#, "");
    let output = grass().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let artifacts = dir.join("artifacts");
    for file in [
        "metrics.jsonl",
        "prob_trace.jsonl",
        "timeline.csv",
        "memory_trace.csv",
        "checkpoint.bin",
        "run_summary.json",
    ] {
        assert!(artifacts.join(file).exists(), "missing {file}");
    }
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("run complete"));
}

#[test]
fn flag_overrides_shape_the_run() {
    let dir = workdir("run_flags");
    let cfg = write_config(&dir, r#"{ "kind": "repetition", "vocab": 4, "period": 4 }"#, "");
    let output = grass()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--total-steps", "3", "--method", "fft"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let metrics = std::fs::read_to_string(dir.join("artifacts/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(!dir.join("artifacts/prob_trace.jsonl").exists());
}

#[test]
fn invalid_config_exits_with_two() {
    let dir = workdir("run_bad_cfg");
    let cfg = write_config(&dir, r#"{ "kind": "repetition", "vocab": 4, "period": 4 }"#, "");
    let output = grass()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--active-layers", "9"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("active_layers"), "stderr: {stderr}");
}

#[test]
fn missing_corpus_exits_with_four() {
    let dir = workdir("run_bad_corpus");
    let cfg = write_config(
        &dir,
        r#"{ "kind": "char_corpus", "path": "/nonexistent/corpus.txt" }"#,
        "",
    );
    let output = grass().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(output.status.code(), Some(4));
}

#[test]
fn diverging_run_exits_with_three_and_leaves_a_checkpoint() {
    let dir = workdir("run_diverge");
    let cfg = write_config(
        &dir,
        r#"{ "kind": "repetition", "vocab": 4, "period": 4 }"#,
        r#", "precision": "f32""#,
    );
    // An absurd learning rate blows the parameters up; the run must
    // abort with the numerical-fault code and still write a checkpoint.
    let text = std::fs::read_to_string(&cfg).unwrap();
    let text = text.replace("\"learning_rate\": 0.001", "\"learning_rate\": 1e18");
    std::fs::write(&cfg, text).unwrap();
    let output = grass()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--method", "fft", "--total-steps", "60"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
    assert!(dir.join("artifacts/checkpoint.bin").exists());
}

#[test]
fn sweep_writes_the_grid_table() {
    let dir = workdir("sweep");
    let cfg = write_config(&dir, r#"{ "kind": "repetition", "vocab": 4, "period": 4 }"#, "");
    let output = grass()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .args(["--probe-steps", "2,4", "--seeds", "1,2"])
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let table = std::fs::read_to_string(dir.join("artifacts/sweep.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 1 + 4, "header plus one row per grid point");
    assert!(rows[0].starts_with("sample_period,active_layers,probe_steps,seed,status"));
    assert!(rows[1..].iter().all(|r| r.contains(",ok,")));
}

#[test]
fn report_summarizes_a_run() {
    let dir = workdir("report");
    let cfg = write_config(&dir, r#"{ "kind": "repetition", "vocab": 4, "period": 4 }"#, "");
    assert!(grass().args(["run", "--config"]).arg(&cfg).output().unwrap().status.success());
    let output = grass()
        .args(["report", "--dir"])
        .arg(dir.join("artifacts"))
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("final val loss"));
    assert!(stdout.contains("device peaks"));
    assert!(dir.join("artifacts/report.txt").exists());
    assert!(dir.join("artifacts/entropy.csv").exists());
}

#[test]
fn gen_dataset_emits_deterministic_batches() {
    let dir = workdir("gen");
    let cfg = write_config(
        &dir,
        r#"{ "kind": "planted_importance", "layer": 1, "signal": 1.0 }"#,
        "",
    );
    let out_a = dir.join("batches_a.jsonl");
    let out_b = dir.join("batches_b.jsonl");
    for out in [&out_a, &out_b] {
        let status = grass()
            .args(["gen-dataset", "--config"])
            .arg(&cfg)
            .args(["--count", "5", "--out"])
            .arg(out)
            .output()
            .unwrap();
        assert!(status.status.success());
    }
    let a = std::fs::read(&out_a).unwrap();
    let b = std::fs::read(&out_b).unwrap();
    assert_eq!(a, b, "generated batches must be deterministic");
    assert_eq!(String::from_utf8_lossy(&a).lines().count(), 5);
}

#[test]
fn output_root_env_var_redirects_relative_dirs() {
    let dir = workdir("env_root");
    let cfg_path = dir.join("config.json");
    let config = r#"{
  "model": { "n_layers": 1, "d_model": 8, "n_heads": 2, "d_ff": 16,
             "vocab_size": 8, "max_seq_len": 8 },
  "method": "fft",
  "dataset": { "kind": "repetition", "vocab": 4, "period": 4 },
  "total_steps": 2, "batch_size": 1, "seq_len": 8, "seed": 1,
  "output_dir": "nested/run"
}"#;
    std::fs::write(&cfg_path, config).unwrap();
    let output = grass()
        .args(["run", "--config"])
        .arg(&cfg_path)
        .env("GRASS_OUTPUT_ROOT", &dir)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert!(dir.join("nested/run/metrics.jsonl").exists());
}

#[test]
fn report_on_missing_artifacts_fails_cleanly() {
    let dir = workdir("report_missing");
    let output = grass().args(["report", "--dir"]).arg(&dir).output().unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("run_summary.json"), "stderr: {stderr}");
}
