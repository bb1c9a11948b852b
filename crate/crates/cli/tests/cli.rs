use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gridtrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridtrack"))
        .args(args)
        .env_remove("GRIDTRACK_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_total_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = gridtrack(&["run", "--algo", "total", "--rho", "10", "--out", path(&out)]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    for name in [
        "metrics.csv",
        "node_errors.csv",
        "aggregate.svg",
        "transcript.jsonl",
        "counters.csv",
        "oracle.csv",
        "bounds.json",
    ] {
        assert!(out.join(name).exists(), "{name}");
    }
    assert!(!out.join("violation.csv").exists());
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 288);
    let bounds: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("bounds.json")).unwrap()).unwrap();
    assert_eq!(bounds["algorithm"], "total");
    assert_eq!(bounds["rho"], 10.0);
}

#[test]
fn run_partial_has_violation_series_and_no_q() {
    let dir = tempfile::tempdir().unwrap();
    let o = gridtrack(&[
        "run",
        "--algo",
        "partial",
        "--rho",
        "formula",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("violation.csv").exists());
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let row: Vec<&str> = metrics.lines().nth(5).unwrap().split(',').collect();
    assert_eq!((row[2], row[3]), ("", ""));
}

#[test]
fn missing_scenario_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let o = gridtrack(&[
        "run",
        "--scenario",
        path(&dir.path().join("missing.json")),
        "--out",
        path(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.json"));
    assert!(!out.exists());
}

#[test]
fn bad_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.json");
    fs::write(&cfg, r#"{"n_nodes": 4, "step": 10}"#).unwrap();
    let o = gridtrack(&[
        "run",
        "--scenario",
        path(&cfg),
        "--out",
        path(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("`step`"));
}

#[test]
fn usage_error_exits_one() {
    let o = gridtrack(&["run", "--rho", "-3"]);
    assert_eq!(o.status.code(), Some(1));
    let o = gridtrack(&["run", "--algo", "fastest"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let scen = dir.path().join("s.json");
    fs::write(
        &scen,
        r#"{"n_nodes": 4, "steps": 60, "supply": {"kind": "constant", "values": [6.0]}}"#,
    )
    .unwrap();
    let run = dir.path().join("run.json");
    fs::write(
        &run,
        format!(
            r#"{{"scenario": "{}", "algo": "partial", "rho": 2.0, "out": "{}"}}"#,
            path(&scen),
            path(&dir.path().join("from-file"))
        ),
    )
    .unwrap();
    let o = gridtrack(&["run", "--config", path(&run)]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let b: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("from-file/bounds.json")).unwrap())
            .unwrap();
    assert_eq!(
        (
            b["algorithm"].as_str(),
            b["rho"].as_f64(),
            b["steps"].as_u64()
        ),
        (Some("partial"), Some(2.0), Some(60))
    );

    let flagged = dir.path().join("flagged");
    let o = gridtrack(&[
        "run",
        "--config",
        path(&run),
        "--algo",
        "total",
        "--rho",
        "3",
        "--out",
        path(&flagged),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let b: serde_json::Value =
        serde_json::from_slice(&fs::read(flagged.join("bounds.json")).unwrap()).unwrap();
    assert_eq!(
        (b["algorithm"].as_str(), b["rho"].as_f64()),
        (Some("total"), Some(3.0))
    );
}

#[test]
fn output_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let scen = dir.path().join("s.json");
    fs::write(&scen, r#"{"n_nodes": 3, "steps": 20}"#).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_gridtrack"))
        .args(["run", "--scenario", path(&scen), "--burn-in", "5"])
        .env("GRIDTRACK_OUT_DIR", dir.path().join("env-out"))
        .output()
        .unwrap();
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(dir.path().join("env-out/metrics.csv").exists());
}

#[test]
fn identical_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = gridtrack(&["run", "--seed", "7", "--out", path(out)]);
        assert_eq!(o.status.code(), Some(0));
    }
    for name in [
        "metrics.csv",
        "transcript.jsonl",
        "node_errors.csv",
        "bounds.json",
    ] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let c = dir.path().join("c");
    gridtrack(&["run", "--seed", "8", "--out", path(&c)]);
    assert_ne!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(c.join("metrics.csv")).unwrap()
    );
}

#[test]
fn saved_scenario_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let saved = dir.path().join("scenario.json");
    let o = gridtrack(&["gen-scenario", "--seed", "3", "--out", path(&saved)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("288 steps"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    gridtrack(&["run", "--seed", "3", "--out", path(&a)]);
    let o = gridtrack(&["run", "--scenario", path(&saved), "--out", path(&b)]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(b.join("metrics.csv")).unwrap()
    );
}

#[test]
fn oracle_dump() {
    let dir = tempfile::tempdir().unwrap();
    let o = gridtrack(&["oracle", "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(0));
    let csv = fs::read_to_string(dir.path().join("oracle.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 288 * 10);
    let drift: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("drift.json")).unwrap()).unwrap();
    assert!(drift["constants"]["c1"].as_f64().unwrap() > 0.0);
}

#[test]
fn verify_projection_suite() {
    let o = gridtrack(&["verify", "--suite", "projection", "--cases", "1000"]);
    assert_eq!(o.status.code(), Some(0));
    let table = stdout(&o);
    let row = table.lines().find(|l| l.starts_with("projection")).unwrap();
    assert!(row.contains(" 1000 ") && row.contains("PASS"), "{row}");
}

#[test]
fn verify_exit_code_matches_table() {
    let o = gridtrack(&["verify", "--cases", "100"]);
    let table = stdout(&o);
    assert_eq!(table.lines().count(), 6);
    let expected = if table.contains("FAIL") { 2 } else { 0 };
    assert_eq!(o.status.code(), Some(expected));
}
