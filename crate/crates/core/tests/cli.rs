use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn profile(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../profiles").join(name)
}

fn actplan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_actplan")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn plan_prints_choices_and_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let p = profile("five_op.json");
    let o = actplan(&["plan", "--profile", p.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("overhead: 0.72 ms per block"), "{text}");

    let json = std::fs::read_to_string(dir.path().join("plan.json")).unwrap();
    let plan = actplan::planner::Plan::from_json(&json).unwrap();
    assert_eq!(plan.choices.len(), 5);
    assert!((plan.objective_ms - 0.72).abs() < 1e-12);
}

#[test]
fn generous_budget_retains_everything() {
    let p = profile("five_op.json");
    let o = actplan(&["plan", "--profile", p.to_str().unwrap(), "--budget", "1GiB"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("all retain, zero overhead"));
}

#[test]
fn tight_budget_exits_infeasible() {
    let p = profile("five_op.json");
    let o = actplan(&["plan", "--profile", p.to_str().unwrap(), "--budget", "1MiB"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("below the minimum achievable"), "{}", stderr(&o));
}

#[test]
fn input_errors_exit_one() {
    let missing = actplan(&["plan", "--profile", "/nonexistent/profile.json"]);
    assert_eq!(missing.status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"n_layers\": 1}").unwrap();
    let malformed = actplan(&["plan", "--profile", bad.to_str().unwrap()]);
    assert_eq!(malformed.status.code(), Some(1));
    assert!(stderr(&malformed).contains("malformed profile"));

    assert_eq!(actplan(&["plan"]).status.code(), Some(1));
    assert_eq!(actplan(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(actplan(&["--help"]).status.code(), Some(0));
}

#[test]
fn simulate_single_batch_to_stdout() {
    let p = profile("gpt345m_like.json");
    let o = actplan(&["simulate", "--profile", p.to_str().unwrap(), "--batches", "4", "--iterations", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("batch,strategy,iteration_ms,overhead_ms,peak_bytes,throughput"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.starts_with("4,")));
}

#[test]
fn simulate_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = profile("gpt345m_like.json");
    let o = actplan(&[
        "simulate",
        "--profile",
        p.to_str().unwrap(),
        "--batches",
        "1..16",
        "--iterations",
        "1",
        "--charts",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for name in ["steps.csv", "drift.csv", "evolution.csv", "throughput_vs_batch.svg", "outlier_drift.svg"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    let evolution = std::fs::read_to_string(dir.path().join("evolution.csv")).unwrap();
    assert_eq!(evolution.lines().count(), 2);
}

#[test]
fn charts_require_out_dir() {
    let p = profile("gpt345m_like.json");
    let o = actplan(&["simulate", "--profile", p.to_str().unwrap(), "--charts"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn max_batch_reports_each_strategy() {
    let p = profile("gpt345m_like.json");
    let o = actplan(&["max-batch", "--profile", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    for strategy in ["retain-all", "full-recompute", "all-compress", "optimal"] {
        assert!(text.contains(strategy), "{text}");
    }
}

#[test]
fn codec_bench_round_trips_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = actplan(&[
        "codec-bench",
        "--rows",
        "64",
        "--cols",
        "256",
        "--scheme",
        "outlier",
        "--outlier-channels",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let bytes = std::fs::read(dir.path().join("tensor.adc")).unwrap();
    let ct = actplan::codec::CompressedTensor::from_bytes(&bytes).unwrap();
    assert_eq!((ct.rows, ct.cols), (64, 256));
    assert_eq!(ct.outlier_count(), 2);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("codec_bench.json")).unwrap()).unwrap();
    assert!(report["ratio"].as_f64().unwrap() > 3.0);
}

#[test]
fn evolve_without_tracking_never_changes_plan() {
    let p = profile("evolution5.json");
    let o = actplan(&["evolve", "--profile", p.to_str().unwrap(), "--iterations", "200", "--no-tracking"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("tracking iterations: 1"), "{text}");
    assert!(text.contains("plan changes:        0"), "{text}");
}
