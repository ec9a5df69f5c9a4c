use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn mcf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcf")).args(args).output().expect("binary runs")
}

fn run_json(cmd: &str, file: &str, extra: &[&str]) -> (i32, Value) {
    let path = fixture(file);
    let mut args = vec![cmd, path.to_str().unwrap(), "--json"];
    args.extend_from_slice(extra);
    let out = mcf(&args);
    let report = serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("{cmd} {file}: {e}\nstderr: {}", String::from_utf8_lossy(&out.stderr))
    });
    (out.status.code().unwrap(), report)
}

fn betti(h: &Value) -> Vec<u64> {
    h["betti"].as_array().unwrap().iter().map(|b| b.as_u64().unwrap()).collect()
}

#[test]
fn block_on_saddle_passes() {
    let (code, r) = run_json("block", "saddle.json", &[]);
    assert_eq!(code, 0);
    assert_eq!(r["verdict"], "Pass");
    assert_eq!(r["result"]["unresolved"].as_array().unwrap().len(), 0);
    assert_eq!(r["result"]["faces"].as_array().unwrap().len(), 32);
}

#[test]
fn tangent_field_lists_unresolved_faces() {
    let (code, r) = run_json("block", "tangent.json", &[]);
    assert_eq!(code, 1);
    assert_eq!(r["verdict"], "Fail");
    assert!(!r["result"]["unresolved"].as_array().unwrap().is_empty());
}

#[test]
fn malformed_input_exits_two() {
    let out = mcf(&["block", fixture("malformed.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let mut f = tempfile::NamedTempFile::new().unwrap();
    write!(
        f,
        r#"{{"dimension": 1, "field": ["x1"], "block": {{"box": [[0, 1]], "spacing": 0.5}}, "colour": 3}}"#
    )
    .unwrap();
    let out = mcf(&["block", f.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "unknown keys are rejected");

    let out = mcf(&["hi", fixture("saddle.json").to_str().unwrap(), "--coeff", "Q"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn hi_on_saddle_matches_exit_set() {
    let (code, r) = run_json("hi", "saddle.json", &[]);
    assert_eq!(code, 0);
    assert_eq!(betti(&r["result"]["morse"]), betti(&r["result"]["cubical"]));
    let b = betti(&r["result"]["morse"]);
    assert_eq!(b.iter().sum::<u64>(), 1);
    assert_eq!(b[1], 1);
}

#[test]
fn hi_on_drift_is_zero() {
    let (code, r) = run_json("hi", "drift.json", &[]);
    assert_eq!(code, 0);
    assert!(betti(&r["result"]["morse"]).iter().all(|b| *b == 0));
    assert!(betti(&r["result"]["cubical"]).iter().all(|b| *b == 0));
}

#[test]
fn dropped_counts_are_reported_as_mismatch() {
    let (code, r) = run_json("hi", "double_well.json", &["--debug-drop-counts"]);
    assert_eq!(code, 1);
    assert_eq!(r["verdict"], "Fail");
    assert!(r["summary"].as_array().unwrap().iter().any(|l| l.as_str().unwrap().starts_with("mismatch")));
}

#[test]
fn relations_quotient() {
    let (code, r) = run_json("relations", "double_well.json", &[]);
    assert_eq!(code, 0);
    assert_eq!(r["result"]["relations"]["quotient"]["coefficients"], serde_json::json!([1]));
    assert_eq!(r["result"]["connection_matrix"]["delta_squared_zero"], true);

    let (code, r) = run_json("relations", "trivial.json", &[]);
    assert_eq!(code, 0);
    assert_eq!(r["result"]["relations"]["quotient"]["coefficients"], serde_json::json!([]));
}

#[test]
fn continuation_breach_names_lambda() {
    let (code, r) = run_json("continue", "breach.json", &[]);
    assert_eq!(code, 1);
    assert!(r["error"].as_str().unwrap().contains("lambda = 0.5"), "{}", r["error"]);
}

#[test]
fn rotating_saddle_continues() {
    let (code, r) = run_json("continue", "rotating_saddle.json", &[]);
    assert_eq!(code, 0, "{r}");
    assert_eq!(r["result"]["index_split"]["verdict"], "Pass");
}

#[test]
fn reports_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<PathBuf> = (0..2).map(|i| dir.path().join(format!("r{i}.json"))).collect();
    for p in &paths {
        let out = mcf(&["hi", fixture("double_well.json").to_str().unwrap(), "--seed", "11", "--out", p.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0));
    }
    let a = std::fs::read(&paths[0]).unwrap();
    assert_eq!(a, std::fs::read(&paths[1]).unwrap());
    let r: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(r["seed"], 11);
    assert_eq!(r["options"]["lyapunov"]["strictness"], 1e-10);
}

#[test]
fn mod2_and_strict_profile() {
    let (code, r) = run_json("hi", "double_well.json", &["--coeff", "Z2", "--tol-profile", "strict"]);
    assert_eq!(code, 0);
    assert_eq!(r["coefficients"], "Z2");
    assert_eq!(r["tolerance_profile"], "strict");
}

#[test]
fn text_output_summarises() {
    let out = mcf(&["cubical", fixture("saddle.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("mcf cubical: Pass"), "{text}");
}
