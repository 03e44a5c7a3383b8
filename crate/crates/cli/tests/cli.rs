use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use swarmco::scenario::ScenarioSpec;

fn swarmco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swarmco"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).expect("stdout is json")
}

fn stderr_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stderr).expect("stderr is json")
}

const SMALL_SIM: &str = r#"
[experiment]
kind = "swarm_impact"

[experiment.sim]
arrivals = { kind = "poisson", rate = 0.3333333333333333 }
pieces = 10
seed_capacity = 0.5
seed_rechoke = 10.0
rechoke_interval = 10.0
unchoke_slots = 4
duration = 300.0
steady_window = [100.0, 300.0]
capacity = { kind = "fixed", pieces_per_sec = 0.5 }
membership = { kind = "all" }
"#;

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.display().to_string()
}

fn workspace() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR")).parent().unwrap().parent().unwrap()
}

#[test]
fn sweep_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace().join("scenarios/sweep.toml");
    let out = dir.path().join("sweep");
    let o = swarmco(&[
        "model", "sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--emit", "both",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["kind"], "sweep");
    assert!(out.join("summary.csv").exists());
    assert!(out.join("summary.json").exists());
}

#[test]
fn sim_run_takes_seed_list_and_emit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.toml", SMALL_SIM);
    let out = dir.path().join("o");
    let o = swarmco(&[
        "sim", "run", "--config", &cfg, "--seed", "4,5", "--out", out.to_str().unwrap(), "--emit", "csv",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["seeds"], serde_json::json!([4, 5]));
    for f in ["completions.csv", "occupancy.csv", "coalition_size.csv", "summary.csv", "summary.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(!out.join("completions.json").exists());
}

#[test]
fn single_seed_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.toml", SMALL_SIM);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = swarmco(&["sim", "run", "--config", &cfg, "--seed", "9", "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
    }
    for f in ["completions.csv", "completions.json", "summary.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn wrong_subcommand_for_kind_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.toml", SMALL_SIM);
    let o = swarmco(&["dyncoal", "run", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr_json(&o);
    assert_eq!(e["status"], "error");
    assert_eq!(e["error"], "kind_mismatch");
}

#[test]
fn missing_config_and_bad_toml_are_reported() {
    let o = swarmco(&["avail", "bench", "--config", "/nonexistent/x.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "io");

    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "replications = 0\n[experiment]\nkind = \"sweep\"\n");
    let o = swarmco(&["model", "sweep", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "parse");
}

#[test]
fn usage_errors_are_json() {
    let o = swarmco(&["sim", "run", "--config", "x.toml", "--seed", "abc"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "usage");
    let o = swarmco(&["sim", "run", "--config", "x.toml", "--emit", "xml"]);
    assert_eq!(stderr_json(&o)["error"], "usage");
    let o = swarmco(&["model", "sweep"]);
    assert_eq!(stderr_json(&o)["error"], "usage");
}

#[test]
fn shipped_scenarios_load() {
    let dir = workspace().join("scenarios");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            ScenarioSpec::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            n += 1;
        }
    }
    assert_eq!(n, 5);
}
