use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

const TINY: &str = r#"
seed = 3
max_level = 2

[scene]
n_cars = [10, 10]

[train]
total_steps = 300
warmup = 50
buffer_capacity = 1000
eval_interval = 0

[eval]
n_cars = 10
"#;

fn lkmerge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lkmerge"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn train(dir: &Path, max_level: u8) -> PathBuf {
    let cfg = write_config(dir, TINY);
    let out = dir.join("registry");
    let o = lkmerge(&[
        "curriculum",
        "--config",
        arg(&cfg),
        "--max-level",
        &max_level.to_string(),
        "--out",
        arg(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

/// Two levels trained once and shared by the read-only tests.
fn shared_registry() -> &'static Path {
    static DIR: OnceLock<(TempDir, PathBuf)> = OnceLock::new();
    let (_, reg) = DIR.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let reg = train(dir.path(), 2);
        (dir, reg)
    });
    reg
}

fn weights_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".lkqn"))
        .collect();
    names.sort();
    names
}

#[test]
fn max_level_one_writes_one_policy() {
    let dir = TempDir::new().unwrap();
    let reg = train(dir.path(), 1);
    assert_eq!(weights_files(&reg), ["level_1.lkqn"]);
    assert!(reg.join("manifest.json").exists());
    assert!(reg.join("config.toml").exists());
}

#[test]
fn identical_runs_give_identical_manifests() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let ma = fs::read(train(a.path(), 1).join("manifest.json")).unwrap();
    let mb = fs::read(train(b.path(), 1).join("manifest.json")).unwrap();
    assert_eq!(ma, mb);
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("registry");
    let o = lkmerge(&[
        "curriculum",
        "--config",
        arg(&dir.path().join("absent.toml")),
        "--out",
        arg(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn unknown_key_is_named() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "[sim]\nwarp_factor = 9\n");
    let out = dir.path().join("registry");
    let o = lkmerge(&["curriculum", "--config", arg(&cfg), "--out", arg(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warp_factor"));
    assert!(!out.exists());
}

#[test]
fn invalid_value_is_named() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "[sim]\ndt = -0.1\n");
    let o = lkmerge(&[
        "curriculum",
        "--config",
        arg(&cfg),
        "--out",
        arg(&dir.path().join("registry")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sim.dt"));
}

#[test]
fn evaluate_writes_full_matrix() {
    let reg = shared_registry();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("matrix.csv");
    let o = lkmerge(&[
        "evaluate",
        "--registry",
        arg(reg),
        "--episodes",
        "3",
        "--out",
        arg(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("policy_level,env_level,n_episodes,success_rate,collision_rate,timeout_rate,mean_time")
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 9);
    for r in &rows {
        assert_eq!(r.len(), 7);
        assert_eq!(r[2], "3");
        let rates: f64 = r[3..6].iter().map(|x| x.parse::<f64>().unwrap()).sum();
        assert!((rates - 1.0).abs() < 1e-9);
    }
}

#[test]
fn evaluate_rejects_incomplete_registry() {
    let dir = TempDir::new().unwrap();
    let reg = dir.path().join("reg");
    fs::create_dir(&reg).unwrap();
    for name in ["manifest.json", "config.toml", "level_1.lkqn"] {
        fs::copy(shared_registry().join(name), reg.join(name)).unwrap();
    }
    let o = lkmerge(&[
        "evaluate",
        "--registry",
        arg(&reg),
        "--episodes",
        "1",
        "--out",
        arg(&dir.path().join("m.csv")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("level_2.lkqn"));
}

fn rollout(policy: &Path, env_level: u8, seed: u64, trace: &Path) -> Output {
    lkmerge(&[
        "rollout",
        "--policy",
        arg(policy),
        "--env-level",
        &env_level.to_string(),
        "--seed",
        &seed.to_string(),
        "--trace",
        arg(trace),
    ])
}

#[test]
fn rollout_trace_has_one_row_per_vehicle_step() {
    let reg = shared_registry();
    let dir = TempDir::new().unwrap();
    let trace = dir.path().join("t.csv");
    let o = rollout(&reg.join("level_2.lkqn"), 1, 4, &trace);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&trace).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "time,vehicle_id,lane_id,p_lon,p_lat,v_lon,v_lat,heading,action_index,reward"
    );
    let footer = lines.last().unwrap();
    let outcome = footer.strip_prefix("# outcome=").expect("outcome footer");
    assert!(["success", "collision", "timeout"].contains(&outcome));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), outcome);

    let rows = &lines[1..lines.len() - 1];
    let vehicles = 10 + 2;
    assert_eq!(rows.len() % vehicles, 0);
    let steps = rows.len() / vehicles;
    let times: std::collections::BTreeSet<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(times.len(), steps);
    let ego_rows = rows
        .iter()
        .filter(|r| r.split(',').nth(8).is_some_and(|a| !a.is_empty()))
        .count();
    assert_eq!(ego_rows, steps);
}

#[test]
fn rollout_is_reproducible() {
    let reg = shared_registry();
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let policy = reg.join("level_1.lkqn");
    assert!(rollout(&policy, 0, 11, &a).status.success());
    assert!(rollout(&policy, 0, 11, &b).status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn rollout_rejects_corrupt_weights() {
    let reg = shared_registry();
    let dir = TempDir::new().unwrap();
    let policy = dir.path().join("level_1.lkqn");
    let mut bytes = fs::read(reg.join("level_1.lkqn")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    bytes.truncate(bytes.len() - 3);
    fs::write(&policy, bytes).unwrap();
    let o = rollout(&policy, 0, 0, &dir.path().join("t.csv"));
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("t.csv").exists());
}

#[test]
fn rollout_needs_opponent_levels() {
    let reg = shared_registry();
    let dir = TempDir::new().unwrap();
    let o = rollout(&reg.join("level_1.lkqn"), 3, 0, &dir.path().join("t.csv"));
    assert_eq!(o.status.code(), Some(1));
}
