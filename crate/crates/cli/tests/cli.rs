mod common;

use std::process::Command;

use common::{entropy, stderr, stdout, BIN};
use serde_json::Value;

fn json_out(args: &[&str]) -> Value {
    let o = entropy(args);
    assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    serde_json::from_str(&stdout(&o)).unwrap()
}

fn manifest(dir: &std::path::Path, name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{name}.manifest.json"))).unwrap()).unwrap()
}

fn csv_rows(dir: &std::path::Path, name: &str) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(dir.join(format!("{name}.csv"))).unwrap();
    r.records().map(|x| x.unwrap()).collect()
}

/// The error line is a single JSON object on stderr.
fn error_line(o: &std::process::Output) -> Value {
    let text = stderr(o);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not a JSON error line: {text}"))
}

#[test]
fn analyze_attack_example() {
    let v = json_out(&["analyze", "attack", "--omega", "10", "--K", "8", "--R", "2", "--phi-mu", "5"]);
    assert_eq!(format!("{:.4}", v["bound"].as_f64().unwrap()), "0.0718");
}

#[test]
fn analyze_bounds_example() {
    let v = json_out(&["analyze", "bounds", "--n", "80", "--k", "32"]);
    assert_eq!(format!("{:.2e}", v["hoeffding"].as_f64().unwrap()), "1.14e-5");
    let v = json_out(&["analyze", "bounds", "--n", "80", "--k", "32", "--validate"]);
    assert_eq!(v["dominates"], true);
}

#[test]
fn analyze_ctmc_validates() {
    let v = json_out(&[
        "analyze", "ctmc", "--N", "60", "--F", "20", "--n", "12", "--k", "4", "--lambda", "0.05", "--evict", "1", "--t",
        "50", "--validate",
    ]);
    assert_eq!(v["agrees_3sigma"], true, "{v}");
    assert_eq!(v["mc_trials"], 100_000);
    assert!(v["absorption"].as_f64().unwrap() > 0.0);
}

#[test]
fn analyze_csv_format() {
    let o = entropy(&["analyze", "bounds", "--n", "80", "--k", "32", "--format", "csv"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "hoeffding,k,n");
    assert!(lines[1].ends_with(",32,80"));
}

#[test]
fn repair_traffic_sweep_rows_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let args = ["sim", "repair-traffic", "--objects", "20,40,60,80,100", "--seeds", "10", "--years", "0.02", "--out", d];
    let o = entropy(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(dir.path(), "repair-traffic");
    assert_eq!(rows.len(), 50);
    let m = manifest(dir.path(), "repair-traffic");
    assert_eq!(m["seed"], 0);
    assert_eq!(m["seeds"].as_array().unwrap().len(), 10);
    assert_eq!(m["sweep"]["var"], "objects");
    assert_eq!(m["config"]["years"], 0.02);
    assert_eq!(m["csv_schema_version"], 1);

    // Rerunning into the same directory reproduces every byte.
    let csv = std::fs::read(dir.path().join("repair-traffic.csv")).unwrap();
    let man = std::fs::read(dir.path().join("repair-traffic.manifest.json")).unwrap();
    assert!(entropy(&args).status.success());
    assert_eq!(std::fs::read(dir.path().join("repair-traffic.csv")).unwrap(), csv);
    assert_eq!(std::fs::read(dir.path().join("repair-traffic.manifest.json")).unwrap(), man);
}

#[test]
fn manifest_config_reproduces_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("a");
    let args = ["sim", "byzantine", "--byzantine", "0,0.3", "--nodes", "300", "--objects", "5", "--years", "0.05"];
    let mut first = args.to_vec();
    first.extend(["--seed", "4", "--out", d.to_str().unwrap()]);
    assert!(entropy(&first).status.success());
    let m = manifest(&d, "byzantine");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, m["config"].to_string()).unwrap();
    let e = dir.path().join("b");
    let o = entropy(&[
        "sim", "byzantine", "--byzantine", "0,0.3", "--config", cfg.to_str().unwrap(), "--out", e.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(d.join("byzantine.csv")).unwrap(),
        std::fs::read(e.join("byzantine.csv")).unwrap()
    );
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 7, "years": 0.01, "nodes": 200, "objects": 2}"#).unwrap();
    let out = dir.path().to_str().unwrap();
    let run = |extra: &[&str], env: Option<&str>| {
        let mut c = Command::new(BIN);
        c.args(["sim", "baseline", "--out", out]).args(extra).env_remove("ENTROPY_SEED");
        if let Some(s) = env {
            c.env("ENTROPY_SEED", s);
        }
        let o = c.output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        manifest(dir.path(), "baseline")["seed"].as_u64().unwrap()
    };
    let c = cfg.to_str().unwrap();
    assert_eq!(run(&["--years", "0.01"], None), 0);
    assert_eq!(run(&["--years", "0.01"], Some("3")), 3);
    assert_eq!(run(&["--config", c], Some("3")), 7);
    assert_eq!(run(&["--config", c, "--seed", "9"], Some("3")), 9);
}

#[test]
fn targeted_range_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let o = entropy(&[
        "sim", "targeted", "--outer", "14,8", "--attacked", "0.02..0.25", "--points", "4", "--nodes", "500",
        "--objects", "5", "--years", "0.01", "--system", "both", "--out", dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(dir.path(), "targeted");
    assert_eq!(rows.len(), 8);
    let values: Vec<&str> = rows.iter().take(4).map(|r| &r[2]).collect();
    assert_eq!(values, ["0.02", "0.096666667", "0.173333333", "0.25"]);
    let m = manifest(dir.path(), "targeted");
    assert_eq!(m["config"]["codec"]["n_chunks"], 14);
    assert_eq!(m["config"]["codec"]["k_outer"], 8);
}

#[test]
fn trace_writes_series() {
    let dir = tempfile::tempdir().unwrap();
    let o = entropy(&[
        "sim", "trace", "--years", "0.1", "--r-group", "80,100", "--objects", "1", "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(dir.path(), "trace");
    assert!(rows.iter().any(|r| &r[3] == "80"));
    assert!(rows.iter().any(|r| &r[3] == "100"));
}

#[test]
fn usage_errors_exit_2_with_json_line() {
    for args in [
        &["sim", "repair-traffic", "--objects", "1,2", "--churn", "1,2"][..],
        &["sim", "trace", "--objects", "1,2"][..],
        &["analyze", "bounds", "--bogus"][..],
        &["node", "evict", "--dir", ".", "--chunk", "00"][..],
    ] {
        let o = entropy(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert_eq!(error_line(&o)["error"], "usage", "{args:?}");
    }
}

#[test]
fn invalid_values_and_unknown_config_keys() {
    let o = entropy(&["sim", "byzantine", "--byzantine", "1.5", "--out", "/nonexistent/x"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_line(&o)["error"], "invalid");

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"nodez": 10}"#).unwrap();
    // An unknown key is treated like an unknown flag.
    let o = entropy(&["sim", "baseline", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let e = error_line(&o);
    assert!(e["message"].as_str().unwrap().contains("nodez"), "{e}");
}

#[test]
fn help_documents_csv_schema() {
    let o = entropy(&["sim", "repair-traffic", "--help"]);
    assert!(o.status.success());
    let h = stdout(&o);
    assert!(h.contains("repair_traffic_objects"));
    assert!(h.contains("schema 1"));
}

#[test]
fn unreachable_node_is_a_remote_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    // Nothing listens on these ports.
    assert!(entropy(&["node", "init", "--dir", d, "--nodes", "3", "--base-port", "1", "--r-group", "3", "--k-inner", "2"]).status.success());
    let chunk = "00".repeat(32);
    let o = entropy(&["node", "view", "--dir", d, "--chunk", &chunk, "--timeout-secs", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_line(&o)["error"], "remote");
}
