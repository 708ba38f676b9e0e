use std::collections::HashSet;
use std::fs;
use std::io::BufReader;
use std::path::Path;
use std::process::{Command, Output};

use cpe_core::problems::pool::read_pool_jsonl;
use cpe_core::problems::{ConfigAssignment, ConfigCatalog, Structure};
use serde_json::Value;

fn cpe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpe")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = cpe(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn small_run(out: &Path, extra: &[&str]) {
    let mut args = vec![
        "run", "--nodes", "7", "--pool-size", "300", "--train-instances", "2", "--test-instances", "2", "--steps",
        "6", "--eval-every", "2", "--dms", "2", "--seed", "3", "--out",
    ];
    let o = out.to_str().unwrap();
    args.push(o);
    args.extend_from_slice(extra);
    ok(&args);
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn run_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    small_run(dir.path(), &[]);
    let summary = read_json(&dir.path().join("summary.json"));
    let sha = summary["manifest_sha256"].as_str().unwrap();
    assert_eq!(sha.len(), 64);

    let csv = fs::read_to_string(dir.path().join("iterations.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), format!("# manifest_sha256={sha}"));
    assert!(lines.next().unwrap().starts_with("dm_id,iteration,regret_mean"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    // Ticks after updates 2, 4 and 6 for each of two DMs.
    assert_eq!(rows.len(), 6);
    let ticks: Vec<&str> = rows.iter().filter(|r| r[0] == "0").map(|r| r[1]).collect();
    assert_eq!(ticks, ["2", "4", "6"]);
    for r in &rows {
        let regret: f64 = r[2].parse().unwrap();
        assert!(regret >= -1e-12, "{regret}");
    }
    assert_eq!(summary["dms"], 2);
    assert_eq!(summary["per_dm"].as_array().unwrap().len(), 2);

    let timings = fs::read_to_string(dir.path().join("timings.csv")).unwrap();
    assert!(timings.lines().nth(1).unwrap().starts_with("dm_id,iteration,select_ms,update_ms"));
    let roster = read_json(&dir.path().join("roster.json"));
    assert_eq!(roster.as_array().unwrap().len(), 2);
    let manifest = read_json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["seed"], 3);
}

#[test]
fn reruns_and_manifest_replay_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    small_run(a.path(), &["--update", "mle-online"]);
    small_run(b.path(), &["--update", "mle-online"]);
    let csv_a = fs::read(a.path().join("iterations.csv")).unwrap();
    assert_eq!(csv_a, fs::read(b.path().join("iterations.csv")).unwrap());

    let m = a.path().join("manifest.json");
    ok(&["run", "--manifest", m.to_str().unwrap(), "--out", c.path().to_str().unwrap()]);
    assert_eq!(csv_a, fs::read(c.path().join("iterations.csv")).unwrap());
    assert_eq!(fs::read(a.path().join("roster.json")).unwrap(), fs::read(c.path().join("roster.json")).unwrap());

    let mut tampered = read_json(&m);
    let hashes = tampered.get_mut("hashes").and_then(Value::as_object_mut).expect("recorded hashes");
    let key = hashes.keys().next().unwrap().clone();
    hashes.insert(key, Value::from("0".repeat(64)));
    let bad = a.path().join("tampered.json");
    fs::write(&bad, tampered.to_string()).unwrap();
    let o = cpe(&["run", "--manifest", bad.to_str().unwrap(), "--out", c.path().to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for args in [
        vec!["run", "--steps", "0", "--out", out],
        vec!["run", "--dms", "0", "--out", out],
        vec!["run", "--problem", "knapsack", "--out", out],
        vec!["run", "--pool-size", "0", "--out", out],
    ] {
        assert_eq!(cpe(&args).status.code(), Some(2), "{args:?}");
    }
    let bad = dir.path().join("m.json");
    fs::write(&bad, "{\"nope\": 1}").unwrap();
    assert_eq!(cpe(&["run", "--manifest", bad.to_str().unwrap(), "--out", out]).status.code(), Some(2));
}

#[test]
fn curves_file_has_closed_forms() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("curves.csv");
    ok(&["curves", "--out", p.to_str().unwrap()]);
    let mut rdr = csv::Reader::from_path(&p).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = |n: &str| headers.iter().position(|h| h == n).unwrap();
    let (x, mle, pp, sp) = (col("x"), col("mle"), col("pp"), col("sp"));
    let mut n = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let v = |i: usize| rec[i].parse::<f64>().unwrap();
        let m = v(x);
        assert!((v(mle) - 1.0 / (1.0 + m.exp())).abs() < 1e-12);
        assert_eq!(v(pp), 1.0);
        assert_eq!(v(sp), if m < 0.0 { 1.0 } else { 0.0 });
        n += 1;
    }
    assert_eq!(n, 241);
}

#[test]
fn relaxed_tsp_pool_is_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["pool", "--nodes", "10", "--pool-size", "10000", "--seed", "1", "--out", dir.path().to_str().unwrap()]);
    let m: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(m["count"], 10000);
    let recs = read_pool_jsonl(BufReader::new(fs::File::open(dir.path().join("pool.jsonl")).unwrap())).unwrap();
    assert_eq!(recs.len(), 10000);
    let tours: HashSet<_> = recs.iter().map(|r| r.structure.clone()).collect();
    assert_eq!(tours.len(), 10000);
    for r in &recs {
        assert_eq!(r.features.dim(), 5);
        assert!(r.features.values().iter().all(|v| *v <= 0.0));
    }
    assert!(dir.path().join("instances.json").exists());
}

#[test]
fn feasible_config_pool_respects_constraints() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&[
        "pool", "--problem", "config", "--pool", "feasible", "--pool-size", "2000", "--compare", "--out",
        dir.path().to_str().unwrap(),
    ]);
    let m: Value = serde_json::from_slice(&out.stdout).unwrap();
    let ratio = m["feasible_over_relaxed"].as_f64().unwrap();
    let (f, r) = (m["feasible_generation_ms"].as_f64().unwrap(), m["relaxed_generation_ms"].as_f64().unwrap());
    assert!((ratio - f / r).abs() < 1e-9);
    let cat = ConfigCatalog::default_catalog();
    let recs = read_pool_jsonl(BufReader::new(fs::File::open(dir.path().join("pool.jsonl")).unwrap())).unwrap();
    assert_eq!(recs.len(), 2000);
    for r in recs {
        let Structure::Choice(c) = r.structure else { panic!("choice expected") };
        assert!(cat.is_feasible(&ConfigAssignment::new(c)));
        assert_eq!(r.features.dim(), cat.feature_dim());
    }
}

#[test]
fn catalog_command_reproduces_bundled_catalog() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("catalog.json");
    ok(&["catalog", "--out", p.to_str().unwrap()]);
    let generated = ConfigCatalog::from_json(&fs::read_to_string(&p).unwrap()).unwrap();
    assert_eq!(generated, ConfigCatalog::default_catalog());
}
