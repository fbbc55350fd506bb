use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TOY: &str = r#"{
    "model": {"kind": "thermal-ring"},
    "safe_set": [[18, 22], [19, 22], [19, 23]],
    "grid": 4,
    "inputs": 2,
    "decomposition": "ring-overlap",
    "seed": 3,
    "verification": {"samples": 20000, "trajectories": 10, "horizon": 200}
}"#;

const CASE1_10: &str = r#"{
    "model": {"kind": "thermal-ring"},
    "safe_set": [[17, 22], [19, 22], [20, 23], [20, 22]],
    "grid": 10,
    "inputs": 3,
    "decomposition": "ring-overlap"
}"#;

fn symctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_symctl")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.in.json");
    fs::write(&p, text).unwrap();
    p
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    symctl(&args)
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn without_timings(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("timings");
    v
}

#[test]
fn synthesize_reports_case1_domain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CASE1_10);
    let out = dir.path().join("out");
    let o = run("synthesize", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&out.join("report.json"));
    assert_eq!(r["composed"]["domain_count"], "8710");
    assert_eq!(r["composed"]["cells"], "10000");
    assert_eq!(r["subsystems"].as_array().unwrap().len(), 4);
    for s in r["subsystems"].as_array().unwrap() {
        assert_eq!(s["reach_calls"].as_u64().unwrap().to_string(), s["expected_reach_calls"].as_str().unwrap());
    }
    for s in 0..4 {
        assert!(out.join(format!("controller_{s}.bin")).exists());
    }
    assert!(out.join("config.json").exists());
}

#[test]
fn overlapping_controlled_sets_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = TOY.replace(
        r#""decomposition": "ring-overlap""#,
        r#""decomposition": [
            {"controlled": [0, 1], "modeled": [0, 1, 2], "inputs": [0]},
            {"controlled": [1, 2], "modeled": [0, 1, 2], "inputs": [1, 2]}
        ]"#,
    );
    let cfg = write_config(dir.path(), &text);
    let o = run("synthesize", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("decomposition"), "{err}");
    assert!(err.contains("controlled sets overlap at component 1"), "{err}");
}

#[test]
fn invalid_json_and_missing_file_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TOY.replace(r#""grid": 4"#, r#""grid": "four""#));
    let o = run("synthesize", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("grid"));
    let o = run("synthesize", &dir.path().join("nope.json"), &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn counting_failure_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CASE1_10);
    let out = dir.path().join("out");
    let o = run("synthesize", &cfg, &out, &["--strategy", "bounds"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&out.join("report.json"));
    assert!(r["composed"]["error"].as_str().unwrap().contains("bounds"));
}

#[test]
fn simulate_without_controllers_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TOY);
    let o = run("simulate", &cfg, &dir.path().join("empty"), &[]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn simulate_writes_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CASE1_10);
    let out = dir.path().join("out");
    assert!(run("synthesize", &cfg, &out, &[]).status.success());
    let o = run("simulate", &cfg, &out, &["--horizon", "40", "--policy", "uniform-random"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("safe for 40 steps"));
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 42);

    // a point outside the safe set stops at once
    let o = run("simulate", &cfg, &out, &["--x0", "30,20,21,21"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("step 0"));

    // controllers written for another configuration are refused
    let other = write_config(dir.path(), &CASE1_10.replace(r#""grid": 10"#, r#""grid": 5"#));
    assert_eq!(run("simulate", &other, &out, &[]).status.code(), Some(4));
}

#[test]
fn reports_are_reproducible_with_reused_abstractions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CASE1_10);
    let out = dir.path().join("out");
    assert!(run("synthesize", &cfg, &out, &["--reuse"]).status.success());
    let first = read_json(&out.join("report.json"));
    let controller = fs::read(out.join("controller_2.bin")).unwrap();
    assert!(out.join("abstraction_0.bin").exists());
    assert!(run("synthesize", &cfg, &out, &["--reuse"]).status.success());
    let second = read_json(&out.join("report.json"));
    assert_eq!(second["timings"]["abstractions_reused"], serde_json::json!([true, true, true, true]));
    assert_eq!(without_timings(first), without_timings(second));
    assert_eq!(controller, fs::read(out.join("controller_2.bin")).unwrap());
}

#[test]
fn verify_toy_passes_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TOY);
    let out = dir.path().join("out");
    let o = run("verify", &cfg, &out, &[]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{stdout}{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&out.join("verification.json"));
    assert_eq!(r["passed"], true);
    let checks = r["checks"].as_array().unwrap();
    assert!(checks.len() >= 11, "{stdout}");
    assert!(checks.iter().all(|c| c["status"] == "pass"), "{stdout}");
}

#[test]
fn verify_rejects_a_mutated_controller() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TOY);
    let out = dir.path().join("out");
    assert!(run("synthesize", &cfg, &out, &[]).status.success());
    // allow both inputs at every cell of subsystem 1 (64 cells, one word each)
    let path = out.join("controller_1.bin");
    let mut bytes = fs::read(&path).unwrap();
    let n = bytes.len();
    for w in bytes[n - 64 * 8..].chunks_mut(8) {
        w.copy_from_slice(&3u64.to_le_bytes());
    }
    fs::write(&path, bytes).unwrap();

    let o = run("verify", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(5));
    let r = read_json(&out.join("verification.json"));
    assert_eq!(r["controllers"], "loaded");
    let closure = r["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == "controller domain is closed")
        .unwrap();
    assert_eq!(closure["status"], "fail");
    let cell = &closure["detail"]["counterexamples"][0]["cell"];
    assert_eq!(cell.as_array().unwrap().len(), 3);
}

#[test]
fn verify_rejects_a_truncated_controller() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TOY);
    let out = dir.path().join("out");
    assert!(run("synthesize", &cfg, &out, &[]).status.success());
    let path = out.join("controller_0.bin");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(run("verify", &cfg, &out, &[]).status.code(), Some(4));
}

#[test]
fn bench_case2_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let o = symctl(&["--threads", "2", "bench", "--case", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("tables.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("2,10,5,ring-overlap,100000000000000000000,100000000000000000000,")));
    assert!(csv.lines().any(|l| l.starts_with("2,10,5,disjoint,100000000000000000000,0,")));
    let r = read_json(&out.join("report.json"));
    assert_eq!(r["rows"][0]["domain_count"], "100000000000000000000");
    assert!(r["rows"][0].get("build_seconds").is_none());
    assert!(r["timings"]["rows"][0]["build_seconds"].is_number());
}
