mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{pillar_config, pillar_dir};
use serde_json::Value;

fn stagehand(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stagehand"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn json_out(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| {
        panic!("{e}: {}\n{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
    })
}

fn write_config(dir: &Path, name: &str, holding: bool) -> String {
    let mut cfg = pillar_config(dir);
    if holding {
        cfg.provider = stagehand_core::config::ProviderConfig::Mock { table: None };
    }
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string(&cfg).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn simulate_replay_and_diff() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = pillar_dir().join("pillar.scenario.json");
    let scenario = scenario.to_str().unwrap();
    let table = write_config(dir.path(), "table.json", false);
    let holding = write_config(dir.path(), "holding.json", true);

    let a = stagehand(&["simulate", "--config", &table, "--scenario", scenario, "--session", "a"]);
    assert!(a.status.success());
    assert_eq!(json_out(&a)["dispatched"], 1);
    let b = stagehand(&["simulate", "--config", &table, "--scenario", scenario, "--session", "b", "--provider", "mock"]);
    assert!(b.status.success());
    let c = stagehand(&["simulate", "--config", &holding, "--scenario", scenario, "--session", "c"]);
    assert_eq!(json_out(&c)["dispatched"], 0);

    let sessions = dir.path().join("sessions");
    let s = |id: &str| sessions.join(id).to_string_lossy().into_owned();

    let r = stagehand(&["replay", "--session", &s("a")]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(json_out(&r)["identical"], true);

    let same = stagehand(&["diff", &s("a"), &s("b")]);
    assert_eq!(same.status.code(), Some(0));
    assert!(json_out(&same)["exchanges"].as_array().unwrap().is_empty());

    let differ = stagehand(&["diff", &s("a"), &s("c")]);
    assert_eq!(differ.status.code(), Some(1));
    let report = json_out(&differ);
    assert!(report["exchanges"].as_array().unwrap().iter().any(|x| x["actions_differ"] == true));

    // a doctored dispatch no longer reproduces
    let log = sessions.join("a/log.ndjson");
    let text = std::fs::read_to_string(&log).unwrap();
    assert!(text.contains(r#""bri":60"#));
    std::fs::write(&log, text.replace(r#""bri":60"#, r#""bri":61"#)).unwrap();
    let r = stagehand(&["replay", "--session", &s("a")]);
    assert_eq!(r.status.code(), Some(1));
    assert_eq!(json_out(&r)["identical"], false);
}

#[test]
fn scripted_provider_needs_replies() {
    let dir = tempfile::tempdir().unwrap();
    let table = write_config(dir.path(), "table.json", false);
    let scenario = pillar_dir().join("pillar.scenario.json");
    let o = stagehand(&["simulate", "--config", &table, "--scenario", scenario.to_str().unwrap(), "--provider", "scripted"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--replies"));
}

#[test]
fn serve_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: Value = serde_json::from_str(&std::fs::read_to_string(pillar_dir().join("config.json")).unwrap()).unwrap();
    cfg["commands"] = serde_json::json!(["when zone(attic) then relay(fan, on)"]);
    cfg["provider"] = serde_json::json!({"kind": "mock"});
    let p = dir.path().join("bad.json");
    std::fs::write(&p, cfg.to_string()).unwrap();
    let o = stagehand(&["serve", "--config", p.to_str().unwrap(), "--bind", "127.0.0.1:0"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("when zone(attic) then relay(fan, on)"), "{err}");
}

#[test]
fn panic_against_unreachable_engine_fails() {
    let o = stagehand(&["panic", "--url", "http://127.0.0.1:9"]);
    assert_eq!(o.status.code(), Some(2));
}
