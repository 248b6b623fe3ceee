use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mvsaddle_cli::{ingest_matched_pairs, parse_csv, render, run, Format, Report, RunConfig, RunOptions};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn mvsaddle(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvsaddle"))
        .args(&args[..1])
        .arg(config)
        .args(&args[1..])
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

const SMALL_MC: &str = r#"{
  "name": "small",
  "model": { "kind": "wishart_diag", "v": [[1.0, 0.3], [0.3, 1.0]] },
  "n": 4,
  "queries": [[1.2, 1.3], [1.5, 1.5]],
  "oracle": { "include": true, "samples": 20000, "seed": 5 }
}"#;

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mc = write(dir.path(), "mc.json", SMALL_MC);
    for config in [fixtures().join("table1.json"), fixtures().join("table2.json"), mc] {
        let a = mvsaddle(&["run", "--full-precision"], &config);
        let b = mvsaddle(&["run", "--full-precision"], &config);
        assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
        assert_eq!(a.stdout, b.stdout, "{config:?}");
    }
}

#[test]
fn csv_round_trip() {
    let cfg = RunConfig::load(&fixtures().join("table2.json")).unwrap();
    let report = run(&cfg, &RunOptions { oracle: true, baseline: true, ..Default::default() }).unwrap();
    let text = render(&report, Format::Csv, true).unwrap();
    let rows = parse_csv(&text).unwrap();
    assert_eq!(rows, report.rows);
    let again = render(&Report { name: report.name.clone(), rows }, Format::Csv, true).unwrap();
    assert_eq!(text, again);
}

#[test]
fn rounded_csv_has_three_significant_digits() {
    let out = mvsaddle(&["run"], &fixtures().join("table1.json"));
    let text = String::from_utf8(out.stdout).unwrap();
    let rows = parse_csv(&text).unwrap();
    assert_eq!(rows.len(), 8);
    assert_eq!(rows[0].approx, Some(9.12e-2));
    let first = text.lines().nth(1).unwrap();
    assert!(first.contains("9.12e-2"), "{first}");
}

#[test]
fn json_output() {
    let out = mvsaddle(&["run", "--format", "json"], &fixtures().join("table3.json"));
    assert!(out.status.success());
    let report: Report = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report.name, "table3");
    assert_eq!(report.rows.len(), 9);
    assert_eq!(report.rows[0].approx, Some(4.42e-1));
    assert_eq!(report.rows[0].t, vec![2.0, 2.0, 7.0]);
}

#[test]
fn empty_query_list() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "empty.json",
        r#"{ "model": { "kind": "exp_sum", "incidence": [[1, 1]] }, "n": 3, "queries": [] }"#,
    );
    let out = mvsaddle(&["run"], &cfg);
    assert!(out.status.success());
    assert!(parse_csv(&String::from_utf8(out.stdout).unwrap()).unwrap().is_empty());
}

#[test]
fn ingest_the_bundled_design() {
    let d = ingest_matched_pairs(&fixtures().join("endometrial.txt")).unwrap();
    assert_eq!(d.rows().len(), 16);
    assert_eq!(d.total(), 63);
    assert!(d.rows().iter().all(|r| r.len() == 3));
}

#[test]
fn ingest_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let one = ingest_matched_pairs(&write(dir.path(), "one.txt", "1 0 0 5\n")).unwrap();
    assert_eq!(one.rows(), &[vec![1, 0, 0]]);
    assert_eq!(one.multiplicities(), &[5]);

    let ragged = write(dir.path(), "ragged.txt", "1 0 0 5\n0 1 1 2\n1 1 3\n");
    let msg = ingest_matched_pairs(&ragged).unwrap_err().to_string();
    assert!(msg.contains("line 3"), "{msg}");

    assert!(ingest_matched_pairs(&dir.path().join("missing.txt")).is_err());
}

#[test]
fn config_errors_name_the_position() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.json", "{\n  \"model\": { \"kind\": \"exp_sum\", \"incidence\": [[1]] },\n  \"n\": -3,\n  \"queries\": []\n}");
    let out = mvsaddle(&["run"], &cfg);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("line 3"), "{err}");

    let unknown = write(dir.path(), "unknown.json", r#"{ "model": { "kind": "poisson" }, "n": 1, "queries": [] }"#);
    assert_eq!(mvsaddle(&["run"], &unknown).status.code(), Some(2));
}

#[test]
fn dimension_mismatch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "dims.json",
        r#"{ "model": { "kind": "exp_sum", "incidence": [[1, 1, 0], [0, 1, 1]] }, "n": 5, "queries": [[2.5, 2.5], [3.0]] }"#,
    );
    let out = mvsaddle(&["run"], &cfg);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("query 1"));
}

#[test]
fn verify_exit_codes() {
    assert!(mvsaddle(&["verify"], &fixtures().join("table2.json")).status.success());
    let dir = tempfile::tempdir().unwrap();
    let strict = fs::read_to_string(fixtures().join("table1.json"))
        .unwrap()
        .replace("\"rel\": 0.05", "\"rel\": 0.001");
    let out = mvsaddle(&["verify"], &write(dir.path(), "strict.json", &strict));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("outside tolerance"));
}

#[test]
fn singular_rows_fail_unless_limit_mode() {
    let cfg = fixtures().join("table1_omitted.json");
    let out = mvsaddle(&["run"], &cfg);
    assert_eq!(out.status.code(), Some(1));
    let rows = parse_csv(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert!(rows.iter().all(|r| r.approx.is_none() && r.error.is_some()));

    let out = mvsaddle(&["run", "--singularity-mode", "limit"], &cfg);
    assert!(out.status.success());
    let rows = parse_csv(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert!(rows.iter().all(|r| r.flags.iter().any(|f| f == "near_removable_singularity")));
}

#[test]
fn sum_scale_matches_mean_scale() {
    let dir = tempfile::tempdir().unwrap();
    let mean = write(
        dir.path(),
        "mean.json",
        r#"{ "model": { "kind": "binom_sum", "incidence": [[1, 1, 0], [0, 1, 1]], "trials": 10, "p": 0.2 }, "n": 8, "queries": [[4.5, 5.0]] }"#,
    );
    let sum = write(
        dir.path(),
        "sum.json",
        r#"{ "model": { "kind": "binom_sum", "incidence": [[1, 1, 0], [0, 1, 1]], "trials": 10, "p": 0.2 }, "n": 8, "scale": "sum", "queries": [[36, 40]] }"#,
    );
    let a = parse_csv(&String::from_utf8(mvsaddle(&["run", "--full-precision"], &mean).stdout).unwrap()).unwrap();
    let b = parse_csv(&String::from_utf8(mvsaddle(&["run", "--full-precision"], &sum).stdout).unwrap()).unwrap();
    assert_eq!(a[0].approx, b[0].approx);
}
