use std::path::Path;
use std::process::{Command, Output};

fn csur(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csur"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .env_remove("CSUR_OUT_DIR")
        .output()
        .expect("csur runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = csur(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn simulate_writes_one_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["simulate", "--L", "10", "--T", "20", "--alpha", "0.4", "--beta", "0.2", "--gamma", "0.1", "--i0", "0.1", "--seed", "7"]);
    let text = String::from_utf8(read(d, "trajectory.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "t,S,I,R");
    assert_eq!(rows.len(), 22);
    for row in &rows[1..] {
        let v: Vec<u32> = row.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(v[1] + v[2] + v[3], 100);
    }
    assert!(d.join("simulate_config.json").exists());
}

#[test]
fn simulate_without_seed_infection_stays_susceptible() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["simulate", "--i0", "0"]);
    let text = String::from_utf8(read(dir.path(), "trajectory.csv")).unwrap();
    assert!(text.lines().skip(1).all(|l| l.ends_with(",100,0,0")));
}

#[test]
fn lockdown_lowers_mean_infected_in_window() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let base = ["simulate", "--alpha", "0.8", "--runs", "1000", "--seed", "3"];
    ok(d, &[&base[..], &["--output", "nolock.csv"]].concat());
    ok(d, &[&base[..], &["--output", "lock.csv", "--lockdown-start", "7"]].concat());
    let mean_i = |name: &str| -> f64 {
        let text = String::from_utf8(read(d, name)).unwrap();
        let v: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
        v[7..=12].iter().sum::<f64>() / 6.0
    };
    assert!(mean_i("lock.csv") < mean_i("nolock.csv"));
}

#[test]
fn bad_flags_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(csur(dir.path(), &["simulate", "--bogus"]).status.code(), Some(2));
    assert_eq!(csur(dir.path(), &["train", "--family", "gru"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = csur(dir.path(), &["simulate", "--lockdown-start", "3"]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "invalid_config");
    let out = csur(dir.path(), &["eval", "--manifest", "missing.json", "--test", "Iprime"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(serde_json::from_slice::<serde_json::Value>(&out.stderr).unwrap()["error"], "io");
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        ok(d, &["gen-data", "--eta", "union", "--R", "200", "--seed", "11"]);
    }
    assert_eq!(read(a.path(), "data.csv"), read(b.path(), "data.csv"));
}

#[test]
fn out_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_csur"))
        .args(["gen-data", "--R", "5"])
        .env("CSUR_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("data.csv").exists());
}

#[test]
fn train_then_eval_reports_every_split() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let small = ["--L", "3", "--T", "16", "--R", "40", "--epochs", "2", "--batch-size", "10", "--train-size", "30", "--val-size", "10", "--splits", "2"];
    ok(d, &[&["train", "--family", "lodernn", "--regime", "I"][..], &small].concat());
    let manifest: serde_json::Value = serde_json::from_slice(&read(d, "lodernn_I_manifest.json")).unwrap();
    assert_eq!(manifest["splits"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["parameter_count"], 13_798);
    ok(d, &["eval", "--manifest", d.join("lodernn_I_manifest.json").to_str().unwrap(), "--test", "Iprime", "--L", "3", "--T", "16", "--R", "20"]);
    let report: serde_json::Value = serde_json::from_slice(&read(d, "eval_lodernn_I_on_Iprime.json")).unwrap();
    let splits = report["per_split"].as_array().unwrap();
    assert_eq!(splits.len(), 2);
    assert!(splits.iter().all(|s| s["anll"].as_f64().unwrap().is_finite()));
}

#[test]
fn bound_with_exact_table_has_zero_probability() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["bound", "--L", "2", "--T", "1"]);
    let report: serde_json::Value = serde_json::from_slice(&read(dir.path(), "bound_report.json")).unwrap();
    assert_eq!(report["grid_points"], 81);
    for row in report["rows"].as_array().unwrap() {
        assert_eq!(row["probability"], 0.0);
    }
}

#[test]
fn oracle_and_gradcheck_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["oracle", "--L", "2", "--T", "1", "--samples", "20000", "--settings", "1"]);
    let report: serde_json::Value = serde_json::from_slice(&read(d, "oracle.json")).unwrap();
    assert!(report[0]["total_variation"].as_f64().unwrap() < 0.05);
    ok(d, &["gradcheck", "--families", "lode", "--R", "2"]);
    let report: serde_json::Value = serde_json::from_slice(&read(d, "gradcheck.json")).unwrap();
    assert_eq!(report[0]["failures"].as_array().unwrap().len(), 0);
}
