use std::path::Path;
use std::process::{Command, Output};

use steerkit::harness::{ConfigFile, ExperimentId, Method};

fn steerkit(args: &[&str], dir: &Path, env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_steerkit"));
    cmd.args(args).current_dir(dir).env_remove("STEERKIT_OUT");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = steerkit(args, dir, &[]);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn tiny_config(dir: &Path) {
    let mut cfg = ConfigFile::default();
    cfg.data.n_per_color = 4;
    cfg.policy_train.data = Some("data".into());
    cfg.policy_train.train.epochs = 2;
    cfg.policy_train.train.hidden = vec![32, 32];
    cfg.dynamics_train.data = Some("data".into());
    cfg.dynamics_train.train.epochs = 2;
    cfg.dynamics_train.train.trunk = vec![32, 32];
    cfg.dynamics_train.train.head_hidden = 16;
    let e = &mut cfg.experiment;
    e.experiment = ExperimentId::Steer;
    e.methods = vec![Method::Base, Method::DynaGuide];
    e.seeds = vec![1, 2];
    e.n_episodes = 2;
    e.guidance.positive_colors = vec![0];
    e.guidance.data = Some("data".into());
    e.models.policy = Some("policy/policy.json".into());
    e.models.dynamics = Some("dynamics/dynamics.json".into());
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path());
    ok(&["gen-data", "--config", "config.json", "--seed", "3", "--out", "a"], dir.path());
    ok(&["gen-data", "--config", "config.json", "--seed", "3", "--out", "b"], dir.path());
    ok(&["gen-data", "--config", "config.json", "--seed", "4", "--out", "c"], dir.path());
    let read = |d: &str, f: &str| std::fs::read(dir.path().join(d).join(f)).unwrap();
    for f in ["data.jsonl", "manifest.json"] {
        assert_eq!(read("a", f), read("b", f), "{f}");
    }
    assert_ne!(read("a", "data.jsonl"), read("c", "data.jsonl"));
}

#[test]
fn env_out_overrides_flag() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path());
    let target = dir.path().join("from_env");
    let out = steerkit(&["gen-data", "--config", "config.json", "--out", "from_flag"], dir.path(), &[("STEERKIT_OUT", &target)]);
    assert!(out.status.success());
    assert!(target.join("data.jsonl").exists());
    assert!(!dir.path().join("from_flag").exists());
}

#[test]
fn bad_invocations_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["gen-data", "--no-such-flag"],
        vec!["frobnicate"],
        vec!["train-policy", "--data", "missing"],
        vec!["gen-data", "--config", "missing.json"],
    ] {
        let out = steerkit(&args, dir.path(), &[]);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(!out.stderr.is_empty(), "{args:?} printed no error");
    }
}

#[test]
fn pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    tiny_config(root);
    ok(&["gen-data", "--config", "config.json", "--seed", "1", "--out", "data"], root);
    ok(&["train-policy", "--config", "config.json", "--seed", "1", "--out", "policy"], root);
    ok(&["train-dynamics", "--config", "config.json", "--seed", "1", "--out", "dynamics"], root);
    for f in ["policy/policy.json", "policy/loss.csv", "dynamics/dynamics.json", "dynamics/loss.csv"] {
        assert!(root.join(f).exists(), "{f}");
    }
    let out = ok(&["eval", "--config", "config.json", "--out", "results"], root);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("dynaguide") || stdout.contains("DynaGuide"), "{stdout}");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(root.join("results/results.json")).unwrap()).unwrap();
    assert!(report.is_object());
    assert!(root.join("results/results.csv").exists());
    let out = ok(&["steer", "--config", "config.json", "--target-color", "2", "--episodes", "1"], root);
    assert!(String::from_utf8_lossy(&out.stdout).contains("summary: target blue"));
    let out = steerkit(&["steer", "--config", "config.json", "--target-color", "9"], root, &[]);
    assert!(!out.status.success());
}
