use std::path::Path;
use std::process::{Command, Output};

fn mhcg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mhcg")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn verify_passes_with_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = mhcg(&["verify", "--out", dir.path().to_str().unwrap(), "--pairs", "1", "--steps", "20000", "--threshold", "0.08"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["pass"], true);
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn failed_verification_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let out = mhcg(&["verify", "--out", dir.path().to_str().unwrap(), "--pairs", "1", "--steps", "50", "--threshold", "1e-9"]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("verification failed"));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = out_dir.to_str().unwrap();
    let cfg = write_config(dir.path(), "seed = 1\nroundz = 3\n");
    let bad_key = mhcg(&["play", "--config", &cfg, "--out", out]);
    assert_eq!(code(&bad_key), 2);
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("roundz"));

    assert_eq!(code(&mhcg(&["play", "--out", out, "--rounds", "0"])), 2);
    assert_eq!(code(&mhcg(&["play", "--out", out, "--methods", "mhcg,nonsense"])), 2);
    assert_eq!(code(&mhcg(&["play", "--out", out, "--no-such-flag"])), 2);
    assert_eq!(code(&mhcg(&["play", "--out", out, "--experiment", "mcmc-verify"])), 2);
    assert_eq!(code(&mhcg(&["pretrain", "--config", "/nonexistent/config.toml"])), 2);
}

#[test]
fn divergent_learning_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[pretrain]\nepochs = 1\nbackbone_epochs = 1\nlr_theta = 1e6\n");
    let out = mhcg(&["pretrain", "--config", &cfg, "--out", dir.path().join("run").to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn play_then_report_and_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "pool_size = 40\nmethods = [\"pretrain\", \"mhcg\", \"ensemble\"]\n[pretrain]\nepochs = 2\nbackbone_epochs = 2\n[game.learn]\nepochs = 1\n",
    );
    let run = dir.path().join("run");
    let out = mhcg(&["play", "--config", &cfg, "--out", run.to_str().unwrap(), "--rounds", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["manifest.json", "metrics.csv", "likelihood.csv", "rounds_mhcg.jsonl", "split.json", "dataset.jsonl", "checkpoints/A.json"] {
        assert!(run.join(name).exists(), "{name}");
    }
    let rounds = std::fs::read_to_string(run.join("rounds_mhcg.jsonl")).unwrap();
    assert_eq!(rounds.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(rounds.lines().next().unwrap()).unwrap();
    for key in ["round", "acceptance_rate_A", "acceptance_rate_B", "joint_loglik_A", "joint_loglik_B", "wallclock_ms"] {
        assert!(first.get(key).is_some(), "{key}");
    }

    let report = mhcg(&["report", run.to_str().unwrap(), "--check"]);
    assert_eq!(code(&report), 0, "{}", String::from_utf8_lossy(&report.stderr));
    let text = String::from_utf8_lossy(&report.stdout);
    assert!(text.contains("ensemble"));
    assert!(text.contains("metrics.csv: identical"), "{text}");
    assert!(!text.contains("DIFFERS"));
}

#[test]
fn pretrain_prints_checkpoint_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[pretrain]\nepochs = 1\nbackbone_epochs = 1\n");
    let out = mhcg(&["pretrain", "--config", &cfg, "--out", dir.path().join("run").to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().all(|l| l.split_whitespace().nth(1).is_some_and(|h| h.len() == 64)));
}
