use std::fs;
use std::path::Path;
use std::process::Command;

use gic_urn::cli::{run_command, EXIT_FAIL, EXIT_OK, EXIT_RESOURCE, EXIT_USAGE};
use serde_json::Value;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("gicurn").chain(args.iter().copied());
    let code = run_command(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const IBD: &str = r#"{
  "structure": {"preset": "friedman(2,1)"},
  "urn": {"N": 50000, "mu": ["1/2", "1/2"], "n": 500},
  "regime": "ibd",
  "ensemble": {"replicates": 20000, "grid": [0.5, 1.0], "base_seed": 11}
}"#;

#[test]
fn limit_w1_friedman() {
    let (code, out, err) = run(&["limit", "--structure", "friedman(2,1)", "--law", "W1", "--t", "1"]);
    assert_eq!(code, EXIT_OK, "{err}");
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["schema_version"], 1);
    let re = &v["covariances"][0]["cov"]["re"];
    let want = [[2.5, 2.0], [2.0, 2.5]];
    for i in 0..2 {
        for j in 0..2 {
            assert!((re[i][j].as_f64().unwrap() - want[i][j]).abs() < 1e-10, "{re}");
        }
    }
}

#[test]
fn limit_time_pairs_and_bad_law() {
    let (code, out, _) = run(&["limit", "--structure", "friedman(2,1)", "--law", "ws", "--t", "0.2,0.7"]);
    assert_eq!(code, EXIT_OK);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["covariances"].as_array().unwrap().len(), 3);
    let (code, _, err) = run(&["limit", "--structure", "friedman(2,1)", "--law", "W9"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("unknown law"));
}

#[test]
fn validate_matching_tsd_fails_a3() {
    let (code, _, err) = run(&["validate", "--structure", "matching(4)", "--regime", "tsd"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("(A3)"), "{err}");
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "m.json",
        r#"{"structure": {"preset": "matching(4)"}, "urn": {"N": 40, "mu": ["1/4", "1/4", "1/4", "1/4"], "n": 40}, "regime": "tsd"}"#,
    );
    let (code, _, err) = run(&["validate", "--config", &cfg]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("(A3)"), "{err}");
}

#[test]
fn validate_reports_spectrum() {
    let (code, out, _) = run(&["validate", "--structure", "friedman(5,1)"]);
    assert_eq!(code, EXIT_OK);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["subcase"], "large-urn-simple");
    assert!((v["lambda1"].as_f64().unwrap() - 6.0).abs() < 1e-10);
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.json", &IBD.replace("\"regime\"", "\"regim\""));
    let (code, _, err) = run(&["verify", "--config", &cfg]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("regim") && err.contains("line"), "{err}");
    let (code, _, _) = run(&["verify"]);
    assert_eq!(code, EXIT_USAGE);
    let (code, _, _) = run(&["simulate", "--config", "/nonexistent/x.json"]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn verify_ibd_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "ibd.json", IBD);
    let out = dir.path().join("out");
    let status = Command::new(env!("CARGO_BIN_EXE_gicurn"))
        .args(["verify", "--suite", "ibd", "--config", &cfg, "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&status.stdout));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("ibd.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["kind"], "suite");
}

#[test]
fn statistical_failure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = IBD
        .replace("20000", "500")
        .replace("\"regime\": \"ibd\",", "\"regime\": \"ibd\", \"tolerances\": {\"mc_rel_tol\": 1e-9},");
    let cfg = write(dir.path(), "strict.json", &text);
    let (code, out, err) = run(&["verify", "--config", &cfg, "--threads", "1"]);
    assert_eq!(code, EXIT_FAIL, "{out}{err}");
    assert!(out.contains("[FAIL]"));
}

#[test]
fn oversized_table_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "big.json", &IBD.replace("20000", "100000000"));
    let (code, _, err) = run(&["simulate", "--config", &cfg]);
    assert_eq!(code, EXIT_RESOURCE, "{err}");
}

#[test]
fn simulate_writes_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let text = IBD.replace("20000", "3").replace("\"base_seed\": 11", "\"base_seed\": 11, \"record_tau\": true");
    let cfg = write(dir.path(), "sim.json", &text);
    let out = dir.path().join("out");
    let (code, _, err) = run(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK, "{err}");
    let csv = fs::read_to_string(out.join("trajectories.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "replicate,grid_point,t,draws,colour_0,colour_1,tau");
    assert_eq!(lines.len(), 1 + 3 * 2);
    let row: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(row[3], "500");
    // 500 draws of Friedman(2,1) add 3 balls each
    let total: i64 = row[4].parse::<i64>().unwrap() + row[5].parse::<i64>().unwrap();
    assert_eq!(total, 50000 + 3 * 500);
    assert!(row[6].parse::<f64>().unwrap() > 0.0);

    let plain = write(dir.path(), "plain.json", &IBD.replace("20000", "3"));
    let out2 = dir.path().join("out2");
    let (code, _, _) = run(&["simulate", "--config", &plain, "--out", out2.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    let csv2 = fs::read_to_string(out2.join("trajectories.csv")).unwrap();
    // the embedded branching process reproduces the urn compositions
    for (a, b) in csv.lines().skip(1).zip(csv2.lines().skip(1)) {
        assert!(a.starts_with(b), "{a} vs {b}");
    }
}

#[test]
fn verify_report_independent_of_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "ibd.json", &IBD.replace("20000", "2000"));
    let mut bytes = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("t{threads}"));
        let (code, _, err) = run(&["verify", "--config", &cfg, "--threads", threads, "--out", out.to_str().unwrap()]);
        assert_eq!(code, EXIT_OK, "{err}");
        bytes.push(fs::read(out.join("ibd.json")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn example_listing_and_unknown() {
    let (code, out, _) = run(&["example"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("friedman-critical"));
    let (code, _, err) = run(&["example", "nope"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("unknown example"));
}

#[test]
fn config_driven_preset_only_suites_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "ibd.json", IBD);
    let (code, _, err) = run(&["verify", "--config", &cfg, "--suite", "tau"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("does not take a config"));
}
