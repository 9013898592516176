use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn rochico(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rochico"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: [&str; 18] = [
    "--set", "env.width=8",
    "--set", "env.height=8",
    "--set", "env.n_agents=3",
    "--set", "env.horizon=12",
    "--set", "algo.episodes=3",
    "--set", "algo.q_hidden=8",
    "--set", "algo.batch_size=8",
    "--set", "algo.intention_dim=4",
    "--set", "algo.cognition_dim=4",
];

fn tiny_train(out: &Path, extra: &[&str]) -> Output {
    let out = out.to_str().unwrap();
    let mut args = vec!["train", "--out", out];
    args.extend(TINY);
    args.extend(extra);
    rochico(&args)
}

#[test]
fn shipped_configs_validate() {
    for name in ["default.conf", "smoke.conf"] {
        let path = configs().join(name);
        let o = rochico(&["validate-config", "--config", path.to_str().unwrap()]);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
        assert!(stdout(&o).contains("algo.gamma = 0.99"));
    }
}

#[test]
fn default_conf_matches_builtin_defaults() {
    let path = configs().join("default.conf");
    let from_file = rochico(&["validate-config", "--config", path.to_str().unwrap()]);
    let builtin = rochico(&["validate-config"]);
    assert_eq!(stdout(&from_file), stdout(&builtin));
}

#[test]
fn invalid_override_exits_with_config_code() {
    let o = rochico(&["validate-config", "--set", "algo.gamma=1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gamma"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_rejected() {
    let o = rochico(&["validate-config", "--set", "algo.no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_writes_one_metrics_line_per_episode_then_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny_train(dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("total_reward").is_some(), "{line}");
    }

    let ckpt = dir.path().join("checkpoint.bin");
    let o = rochico(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--seeds", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("±") && text.contains("over 2 seeds"), "{text}");
}

#[test]
fn dump_intentions_round_trips_to_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny_train(dir.path(), &["--dump-intentions"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = rochico(&["dump-intentions", "--run", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("individual.csv").exists());
    assert!(dir.path().join("team.csv").exists());
}

#[test]
fn dump_intentions_without_data_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = rochico(&["dump-intentions", "--run", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("no data"));
}

#[test]
fn ablate_requires_a_variant() {
    let o = rochico(&["ablate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--variant"));
}

#[test]
fn ablate_runs_a_baseline_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let mut args = vec!["ablate", "--variant", "idqn", "--seeds", "2", "--out", out];
    args.extend(TINY);
    let o = rochico(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    for s in [0, 1] {
        let m = fs::read_to_string(dir.path().join(format!("seed-{s}/metrics.jsonl"))).unwrap();
        assert_eq!(m.lines().count(), 3);
    }
}
