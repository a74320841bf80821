use std::path::Path;
use std::process::{Command, Output};

fn defotox(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_defotox"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn error_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr line");
    serde_json::from_str(line).expect("json error on stderr")
}

#[test]
fn phantom_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = defotox(&["phantom", "--seed", "7", "--deformation-mm", "8", "--grid", "16", "--out", arg(d)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.iter().any(|n| n == "pct.v3j"));
    assert!(names.iter().any(|n| n == "config.json"));
    assert!(!names.iter().any(|n| n == ".staging" || n == "PARTIAL.json"));
    for n in names.iter().filter(|n| *n != "config.json") {
        assert_eq!(std::fs::read(a.join(n)).unwrap(), std::fs::read(b.join(n)).unwrap(), "{n:?}");
    }
    let cfg: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 7);
    assert_eq!(cfg["grid"], 16);
}

#[test]
fn jacobian_of_a_generated_field() {
    let dir = tempfile::tempdir().unwrap();
    let ph = dir.path().join("ph");
    assert!(defotox(&["phantom", "--grid", "16", "--out", arg(&ph)]).status.success());
    let jd = dir.path().join("jac");
    let out = defotox(&["jacobian", "--dvf", arg(&ph.join("gt_dvf_35.v3j")), "--out", arg(&jd)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s: serde_json::Value = serde_json::from_slice(&std::fs::read(jd.join("summary.json")).unwrap()).unwrap();
    assert!(s["det_min"].as_f64().unwrap() > 0.0);
    assert!(s["deformed_fraction"].as_f64().unwrap() > 0.0);
}

#[test]
fn failure_leaves_only_a_marker() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let missing = dir.path().join("nope.v3j");
    let out = defotox(&["jacobian", "--dvf", arg(&missing), "--out", arg(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "io");
    let names: Vec<_> = std::fs::read_dir(&out_dir).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, ["PARTIAL.json"]);
    let marker: serde_json::Value = serde_json::from_slice(&std::fs::read(out_dir.join("PARTIAL.json")).unwrap()).unwrap();
    assert_eq!(marker["subcommand"], "jacobian");
}

#[test]
fn usage_errors_are_json() {
    let out = defotox(&["phantom", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "usage");
    let dir = tempfile::tempdir().unwrap();
    let out = defotox(&["reg-rigid", "--out", arg(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "usage");
}

#[test]
fn config_file_and_env_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"seed": 3, "grid": 16, "deformation_mm": 4.0}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_defotox"))
        .args(["phantom", "--config", arg(&cfg)])
        .env("DEFOTOX_OUT_ROOT", dir.path())
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let resolved: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("phantom/config.json")).unwrap()).unwrap();
    assert_eq!(resolved["deformation_mm"], 4.0);
    assert_eq!(resolved["seed"], 3);
}
