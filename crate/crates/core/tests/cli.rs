//! The `ba3c` binary: exit codes, written outputs and config provenance.

use std::path::Path;
use std::process::{Command, Output};

use ba3c::config::RunConfig;

fn ba3c(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ba3c"))
        .args(args)
        .current_dir(dir)
        .env("BA3C_DETERMINISTIC", "1")
        .output()
        .expect("spawn ba3c")
}

const TINY: [&str; 12] = [
    "--set",
    "train.frames=600",
    "--set",
    "train.eval_interval=0",
    "--set",
    "train.eval_games=3",
    "--set",
    "pipeline.n_envs=2",
    "--set",
    "pipeline.batch_size=4",
    "--set",
    "pipeline.predict_min_batch=1",
];

fn with_tiny<'a>(head: &[&'a str]) -> Vec<&'a str> {
    let mut v = head.to_vec();
    v.extend(TINY);
    v
}

#[test]
fn train_writes_outputs_and_eval_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let out = ba3c(dir.path(), &with_tiny(&["train", "--seed", "3", "--out", "run"]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    for f in ["metrics.jsonl", "timing.jsonl", "summary.json", "model.ckpt", "model.arch.json", "config.json"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }

    // the recorded config resolves back to the same config
    let cfg = RunConfig::load(&run.join("config.json"), &Default::default()).unwrap();
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.train.frames, 600);
    assert_eq!(cfg.to_json().unwrap(), std::fs::read_to_string(run.join("config.json")).unwrap());

    let out = ba3c(dir.path(), &["eval", "--checkpoint", "run/model.ckpt", "--games", "7"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["games"], 7);
    assert!(v["mean"].as_f64().unwrap() <= v["max"].as_f64().unwrap());
}

#[test]
fn eval_without_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ba3c(dir.path(), &["eval", "--checkpoint", "nope/model.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["train", "--set", "pipeline.no_such_key=1"],
        vec!["train", "--profile", "huge"],
        vec!["train", "--set", "pipeline.batch_size=0"],
        vec!["train", "--config", "missing.json"],
        vec!["bench", "--cases", "everything"],
        vec!["bench", "--repeats", "2"],
        vec!["frobnicate"],
    ] {
        let out = ba3c(dir.path(), &args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn runtime_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("blocker"), b"a file, not a directory").unwrap();
    let out = ba3c(dir.path(), &with_tiny(&["train", "--out", "blocker/run"]));
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_file_and_flags_layer() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.json"),
        r#"{"train.frames": 400, "pipeline": {"n_envs": 3}, "seed": 1}"#,
    )
    .unwrap();
    let mut args = with_tiny(&["train", "--config", "c.json", "--seed", "9", "--out", "o"]);
    // the later --set wins over the earlier one from TINY
    args.extend(["--set", "pipeline.n_envs=3"]);
    let out = ba3c(dir.path(), &args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = RunConfig::load(&dir.path().join("o/config.json"), &Default::default()).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.pipeline.n_envs, 3);
    // TINY sets frames after the file
    assert_eq!(cfg.train.frames, 600);
}

#[test]
fn bench_writes_csv_and_markdown() {
    let dir = tempfile::tempdir().unwrap();
    let out = ba3c(
        dir.path(),
        &["bench", "--batch", "1", "--repeats", "3", "--warmup", "0", "--out", "b"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("b/bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("op,input_shape,kernel_shape,impl,median_ms,p10_ms,p90_ms,speedup"));
    let conv_rows = csv.lines().filter(|l| !l.starts_with("CONVERT") && !l.starts_with("op,")).count();
    assert_eq!(conv_rows, 4 * 3 * 2);
    assert_eq!(csv.lines().filter(|l| l.contains("N/A")).count(), 2 + 12);
    assert!(dir.path().join("b/bench.md").is_file());
}
