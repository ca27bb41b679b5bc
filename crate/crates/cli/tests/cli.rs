use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_recovery-forge"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("exp.json");
    std::fs::write(
        &p,
        r#"{
  "seeds": [0, 1],
  "chaining": {"n_trajectories": 40, "cost_episodes": 20},
  "discovery": {"n_episodes": 300},
  "recovery": {"n_eval": 20, "reps": {"n_updates": 4, "n_samples_per_update": 20}},
  "allocator": {"budget": 60},
  "evaluation": {"n_episodes": 30}
}"#,
    )
    .unwrap();
    p
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn missing_config_exits_with_2() {
    let o = run(&["discover", "--config", "/definitely/not/here.json"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("not found"), "{err}");

    let o = run(&["discover"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}

#[test]
fn malformed_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, "{ seeds: ").unwrap();
    let o = run(&["train", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("schema"));
}

#[test]
fn unknown_strategy_is_rejected() {
    let o = run(&["train", "--strategy", "greedy"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_alloc_writes_one_directory_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    let o = run(&[
        "synth-alloc",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "7",
        "--budget",
        "90",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run_dir = out.join("synth-alloc-seed7");
    assert!(!out.join("synth-alloc-seed0").exists());
    assert_eq!(header(&run_dir.join("rounds_ucl.csv")), "round,strategy,i,j,q_new,q_ucl,fv");
    assert_eq!(header(&run_dir.join("summary.csv")), "strategy,initial_fv,final_fv,rounds_to_rr_best");
    let rows = std::fs::read_to_string(run_dir.join("rounds_rr.csv")).unwrap();
    assert_eq!(rows.lines().count(), 91);
    let snap: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(snap["synthetic"]["budget"], 90);
    assert_eq!(snap["seeds"], serde_json::json!([7]));
}

#[test]
fn evaluate_runs_the_whole_pipeline_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = run(&[
            "evaluate",
            "--config",
            cfg.to_str().unwrap(),
            "--strategy",
            "rr",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        for seed in 0..2 {
            for f in [
                format!("chain-preconds-seed{seed}/summary.csv"),
                format!("discover-seed{seed}/failures.csv"),
                format!("train-rr-seed{seed}/rounds.csv"),
                format!("evaluate-seed{seed}/evaluation.csv"),
            ] {
                assert!(out.join(&f).exists(), "{f}");
            }
        }
        outputs.push(std::fs::read(out.join("evaluate-summary.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let h = header(&dir.path().join("a/evaluate-seed0/evaluation.csv"));
    assert!(h.starts_with("policy,travel_capped,episodes,successes,success_rate,cost_mean,cost_std"));
}

#[test]
fn log_level_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    let o = bin()
        .args(["chain-preconds", "--config", cfg.to_str().unwrap(), "--seed", "0", "--out", out.to_str().unwrap()])
        .env("RECOVERY_FORGE_LOG", "info")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("preconditions written"));

    let o = bin()
        .args(["chain-preconds", "--config", cfg.to_str().unwrap(), "--seed", "0", "--out", out.to_str().unwrap()])
        .env_remove("RECOVERY_FORGE_LOG")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(o.stderr.is_empty());
}
