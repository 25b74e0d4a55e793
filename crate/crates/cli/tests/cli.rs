use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::tempdir;

fn core_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core").join(rel)
}

fn riemann() -> PathBuf {
    core_file("scenarios/riemann.json")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_logit-lanes")).args(args).output().expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Distinct values of the first CSV column after the header.
fn times(csv: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for line in csv.lines().skip(1) {
        let t = line.split(',').next().unwrap().to_string();
        if out.last() != Some(&t) {
            out.push(t);
        }
    }
    out
}

#[test]
fn simulate_writes_initial_and_final_snapshots() {
    let dir = tempdir().unwrap();
    let out = run(&["simulate", riemann().to_str().unwrap(), "--cells", "100", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let snapshots = fs::read_to_string(dir.path().join("snapshots.csv")).unwrap();
    let t = times(&snapshots);
    assert_eq!(t.len(), 2);
    assert_eq!(t[0], "0");
    assert!((t[1].parse::<f64>().unwrap() * 60.0 - 2.0).abs() < 1e-12);
    assert_eq!(snapshots.lines().count(), 1 + 2 * 100);
    assert!(dir.path().join("mass.csv").exists());
    assert!(dir.path().join("snapshot_001.svg").exists());
    assert!(!dir.path().join("groups.csv").exists());
}

#[test]
fn lagrange_simulation_writes_group_trajectories() {
    let dir = tempdir().unwrap();
    let out = run(&[
        "simulate",
        riemann().to_str().unwrap(),
        "--scheme",
        "lagrange",
        "--duration",
        "0.005",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let groups = fs::read_to_string(dir.path().join("groups.csv")).unwrap();
    assert!(groups.starts_with("t,group_id,class,x,phi_lane1,phi_lane2,v\n"));
}

#[test]
fn zero_duration_keeps_only_the_initial_state() {
    let dir = tempdir().unwrap();
    let out = run(&[
        "simulate",
        riemann().to_str().unwrap(),
        "--cells",
        "40",
        "--duration",
        "0",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let snapshots = fs::read_to_string(dir.path().join("snapshots.csv")).unwrap();
    assert_eq!(times(&snapshots), vec!["0".to_string()]);
}

#[test]
fn unknown_scheme_lists_valid_names() {
    let dir = tempdir().unwrap();
    let out = run(&["simulate", riemann().to_str().unwrap(), "--scheme", "godunov", "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let err = stderr(&out);
    for name in ["lax-friedrichs", "rusanov", "remap", "lagrange"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn compare_is_deterministic_and_self_distance_vanishes() {
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    for dir in [&a, &b] {
        let out = run(&[
            "compare",
            riemann().to_str().unwrap(),
            "--scheme",
            "remap:cells=80",
            "--scheme",
            "remap:cells=80",
            "--scheme",
            "lagrange:group=5,cells=80",
            "--duration",
            "0.005",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    for file in ["comparison.json", "comparison.csv"] {
        assert_eq!(fs::read(a.path().join(file)).unwrap(), fs::read(b.path().join(file)).unwrap(), "{file}");
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(a.path().join("comparison.json")).unwrap()).unwrap();
    let distances = report["distances"].as_array().unwrap();
    let same = distances
        .iter()
        .filter(|d| d["scheme"] == d["reference"])
        .map(|d| d["relative_l1"].as_f64().unwrap())
        .collect::<Vec<_>>();
    assert!(!same.is_empty() && same.iter().all(|&x| x == 0.0));
}

#[test]
fn equilibrium_prints_split() {
    let out = run(&["equilibrium", riemann().to_str().unwrap(), "--rho", "10,90"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let value: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let lanes = value["split"]["lane_density"].as_array().unwrap();
    let total: f64 = lanes.iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((total - 100.0).abs() < 1e-9);
    assert!(value["max_wave_speed"].as_f64().unwrap() > 0.0);
}

#[test]
fn estimate_recovers_shipped_dataset() {
    let dir = tempdir().unwrap();
    let data = core_file("data/synthetic_nu30.csv");
    let out = run(&["estimate", data.to_str().unwrap(), "--band", "0:1000", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("estimate.json")).unwrap()).unwrap();
    let grid: Vec<f64> = report["grid"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    let step = (grid[1] / grid[0]).ln();
    let stations = report["stations"].as_array().unwrap();
    assert_eq!(stations.len(), 2);
    for station in stations {
        let nu = station["bands"][0]["grid"]["nu"].as_f64().unwrap();
        assert!((nu / 30.0).ln().abs() <= step + 1e-12, "{nu}");
    }
    assert!(dir.path().join("sse_curve.csv").exists());
}

#[test]
fn estimate_rejects_empty_input() {
    let dir = tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let out = run(&["estimate", empty.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error:"), "{}", stderr(&out));
}

#[test]
fn estimate_rejects_single_lane_records() {
    let dir = tempdir().unwrap();
    let csv = dir.path().join("one.csv");
    fs::write(&csv, "station,timestamp,lane,density,speed\nA,1,1,20,80\nA,2,1,25,75\n").unwrap();
    let out = run(&["estimate", csv.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("insufficient lanes"), "{}", stderr(&out));
}
