use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 11
trajectories = 3
policies = ["GRD", "GRD_noVGI", "null"]

[station]
n_chargers = 2
n_waiting = 1
delta_a = 25.0
horizon_hours = 4.0
start_hour = 10.0

[pattern]
name = "highway"
scale = 0.3

[train]
episodes = 10
hidden = [16, 8]
lr_decay_every = 4
epsilon_decay_fraction = 0.5

[bench]
sizes = [2, 4]
mpc_sizes = [2]
from_step = 4
cade_steps = 4
mpc_steps = 1
repeats = 1
scale_sizes = [2, 4]
scale_trajectories = 2
"#;

const TINY: &str = r#"
[station]
n_chargers = 1
n_waiting = 1
delta_a = 25.0
horizon_hours = 2.0
start_hour = 16.0

[pattern]
name = "highway"
scale = 0.15
"#;

fn cade(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cade")).args(args).output().expect("run cade")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("spec.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn data_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().filter(|l| !l.starts_with('#')).map(String::from).collect()
}

#[test]
fn train_writes_metrics_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let o = cade(&["train", "--config", &cfg, "--out", dir.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let text = fs::read_to_string(a.join("fig3_training.csv")).unwrap();
    assert!(text.starts_with("# fingerprint="), "{text}");
    assert!(text.lines().next().unwrap().contains("seed=11"));
    assert_eq!(data_lines(&a.join("fig3_training.csv")).len(), 1 + 10);
    assert_eq!(fs::read(a.join("weights.bin")).unwrap(), fs::read(b.join("weights.bin")).unwrap());
    assert_eq!(fs::read(a.join("fig3_training.csv")).unwrap(), fs::read(b.join("fig3_training.csv")).unwrap());
}

#[test]
fn outputs_are_not_overwritten_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("o");
    let out = out.to_str().unwrap();
    assert!(cade(&["train", "--config", &cfg, "--out", out, "--episodes", "2"]).status.success());
    let again = cade(&["train", "--config", &cfg, "--out", out, "--episodes", "2"]);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));
    let forced = cade(&["train", "--config", &cfg, "--out", out, "--episodes", "2", "--force"]);
    assert!(forced.status.success(), "{}", stderr(&forced));
}

#[test]
fn resume_continues_the_schedules() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let whole = tmp.path().join("whole");
    let split = tmp.path().join("split");
    assert!(cade(&["train", "--config", &cfg, "--out", whole.to_str().unwrap()]).status.success());
    assert!(cade(&["train", "--config", &cfg, "--out", split.to_str().unwrap(), "--episodes", "6"]).status.success());
    let o = cade(&["train", "--config", &cfg, "--out", split.to_str().unwrap(), "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cols = |p: &Path| -> Vec<(String, String, String)> {
        data_lines(p)
            .iter()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f[0].to_string(), f[7].to_string(), f[8].to_string())
            })
            .collect()
    };
    let a = cols(&whole.join("fig3_training.csv"));
    let b = cols(&split.join("fig3_training.csv"));
    // the first six episodes ran under a six-episode schedule; the resumed
    // ones must follow the ten-episode schedule from the saved counter
    assert_eq!(a.len(), 10);
    assert_eq!(b.len(), 10);
    assert_eq!(a[6..], b[6..], "episode, epsilon and learning-rate columns");
}

#[test]
fn eval_runs_baselines_and_needs_weights_for_cade() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("e");
    let out_s = out.to_str().unwrap();
    let o = cade(&["eval", "--config", &cfg, "--out", out_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = data_lines(&out.join("fig5_profit.csv"));
    assert_eq!(rows[0], "policy,seed,profit,charge_revenue,discharge_revenue,penalty,demand_charge");
    assert_eq!(rows.len(), 1 + 3 * 3);
    // the null policy never charges, discharges or draws power
    for r in rows.iter().filter(|r| r.starts_with("null,")) {
        let f: Vec<f64> = r.split(',').skip(2).map(|x| x.parse().unwrap()).collect();
        assert_eq!((f[1], f[2], f[4]), (0.0, 0.0, 0.0));
    }
    assert!(out.join("fig4_soc.csv").exists());
    let missing = cade(&["eval", "--config", &cfg, "--out", out_s, "--policy", "CADE", "--force"]);
    assert_eq!(missing.status.code(), Some(3), "{}", stderr(&missing));
}

#[test]
fn trained_weights_feed_eval_qsweep_and_bench() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("t");
    let out_s = out.to_str().unwrap();
    assert!(cade(&["train", "--config", &cfg, "--out", out_s, "--episodes", "3"]).status.success());
    let o = cade(&["eval", "--config", &cfg, "--out", out_s, "--policy", "CADE,MPC(1h),MPC_ideal(1h)"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(data_lines(&out.join("fig5_profit.csv")).len(), 1 + 3 * 3);
    let o = cade(&["qsweep", "--config", &cfg, "--out", out_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = data_lines(&out.join("fig7_qsweep.csv"));
    for axis in ["h_onehot", "t_r", "n_wait", "L_current"] {
        assert!(rows.iter().any(|r| r.starts_with(axis)), "axis {axis} missing");
    }
    let bad = cade(&["qsweep", "--config", &cfg, "--out", out_s, "--axis", "speed", "--force"]);
    assert_eq!(bad.status.code(), Some(2));
    let o = cade(&["bench", "--config", &cfg, "--out", out_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(data_lines(&out.join("table3_latency.csv")).len(), 1 + 3);
    assert_eq!(data_lines(&out.join("fig6_scale.csv")).len(), 1 + 2);
}

#[test]
fn config_errors_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[station]\nmu = -1.0\n");
    let o = cade(&["eval", "--config", &cfg, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("station.mu"), "{}", stderr(&o));
    let o = cade(&["eval", "--config", "/nonexistent/spec.toml"]);
    assert_eq!(o.status.code(), Some(2));
    let o = cade(&["eval", "--policy", "LQR", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(cade(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn oracle_writes_a_schedule_or_rejects_large_instances() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("o");
    let o = cade(&["oracle", "--config", &cfg, "--out", out.to_str().unwrap(), "--instance", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("optimal profit"));
    let text = fs::read_to_string(out.join("oracle_schedule.csv")).unwrap();
    assert!(text.lines().next().unwrap().contains("profit="));
    let big = write_config(tmp.path(), SMALL);
    let o = cade(&["oracle", "--config", &big, "--out", out.to_str().unwrap(), "--force"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
