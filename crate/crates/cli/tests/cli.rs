//! Exit codes, manifests and output layout of the `rapo-lab` binary.

use std::path::Path;
use std::process::{Command, Output};

fn lab(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rapo-lab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

const QUICK: [&str; 4] = ["--set", "warmup_steps=20", "--prompts-per-step", "2"];

#[test]
fn missing_config_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(&["train", "--config", "/no/such/file.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/file.cfg"));
}

#[test]
fn bad_values_and_unknown_keys_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(lab(&["train", "--rho", "0"], dir.path()).status.code(), Some(2));
    assert_eq!(lab(&["train", "--set", "bogus=1"], dir.path()).status.code(), Some(2));
    assert_eq!(lab(&["train", "--variant", "ppo"], dir.path()).status.code(), Some(2));
    assert_eq!(lab(&["no-such-command"], dir.path()).status.code(), Some(2));
}

#[test]
fn zero_steps_writes_manifest_and_no_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--steps", "0", "--seed", "4"];
    args.extend(QUICK);
    let o = lab(&args, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(dir.path());
    assert_eq!(m["subcommand"], "train");
    assert_eq!(m["seed"], 4);
    assert_eq!(m["exit_code"], 0);
    assert!(m["finished_unix"].as_f64().is_some());
    assert!(m["config"].as_array().unwrap().iter().any(|kv| kv[0] == "prompts_per_step" && kv[1] == "2"));
    assert_eq!(std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap(), "");
    assert!(dir.path().join("final.ckpt").exists());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "variant = rapo_d\ngamma = 0.3\nseed = 8\n").unwrap();
    let out = dir.path().join("out");
    let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--gamma", "0.05", "--steps", "0"];
    args.extend(QUICK);
    assert_eq!(lab(&args, &out).status.code(), Some(0));
    let m = manifest(&out);
    let get = |k: &str| {
        m["config"]
            .as_array()
            .unwrap()
            .iter()
            .find(|kv| kv[0] == k)
            .map(|kv| kv[1].as_str().unwrap().to_string())
            .unwrap()
    };
    assert_eq!(get("variant"), "rapo_d");
    assert_eq!(get("gamma"), "0.05");
    assert_eq!(get("seed"), "8");
    assert_eq!(get("clip_high"), "0.28");
}

#[test]
fn verify_theory_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    assert_eq!(lab(&["verify-theory", "--seeds", "0"], &empty).status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(empty.join("report.jsonl")).unwrap(), "");

    let clean = dir.path().join("clean");
    assert_eq!(lab(&["verify-theory", "--seeds", "25"], &clean).status.code(), Some(0));

    let bug = dir.path().join("bug");
    let o = lab(&["verify-theory", "--seeds", "25", "--mutation", "flip-psi-sign"], &bug);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
    assert_eq!(manifest(&bug)["exit_code"], 1);

    assert_eq!(lab(&["verify-theory", "--max-vocab", "9"], dir.path()).status.code(), Some(2));
}

#[test]
fn diagnose_usage_checkpoint_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut args = vec!["train", "--steps", "1"];
    args.extend(QUICK);
    assert_eq!(lab(&args, &run).status.code(), Some(0));
    let ckpt = run.join("final.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    assert_eq!(lab(&["diagnose", "--checkpoint", ckpt], &dir.path().join("d0")).status.code(), Some(2));
    assert_eq!(
        lab(&["diagnose", "--checkpoint", "/no/such.ckpt", "--measure", "profile"], &dir.path().join("d1")).status.code(),
        Some(2)
    );
    let args = ["diagnose", "--checkpoint", ckpt, "--measure", "profile,concentration", "--instances", "6"];
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(lab(&args, &a).status.code(), Some(0));
    assert_eq!(lab(&args, &b).status.code(), Some(0));
    for f in ["profile.csv", "concentration.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    let csv = std::fs::read_to_string(a.join("profile.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap().is_finite()));
}

#[test]
fn rollout_dumps_and_env_var_sets_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["rollout", "--prompts", "2", "--group-size", "3"];
    args.extend(QUICK);
    let o = Command::new(env!("CARGO_BIN_EXE_rapo-lab"))
        .args(&args)
        .env("RAPO_LAB_OUT", dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let dump = std::fs::read_to_string(dir.path().join("rollout/trajectories.jsonl")).unwrap();
    assert_eq!(dump.lines().count(), 6);
    assert!(dir.path().join("rollout/manifest.json").exists());
}
