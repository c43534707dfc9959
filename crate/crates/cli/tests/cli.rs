use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use anneal_bound_cli::config::RunConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_anneal-bound"))
}

fn run_config(dir: &Path, json: &str, extra: &[&str]) -> Output {
    let cfg = dir.join("config.json");
    fs::write(&cfg, json).unwrap();
    let out = dir.join("out");
    bin()
        .arg("run")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(extra)
        .output()
        .unwrap()
}

fn report_rows(dir: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(dir.join("out/report.csv")).unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect()
}

const TWO_STATE: &str = r#"{
    "system": {"kind": "two_state", "rates": [1.0, 2.0]},
    "protocol": {"kind": "constant", "gamma": 1.0, "tau": 1.0, "steps": 10},
    "initial": {"kind": "point_mass", "index": 0},
    "checks": ["main_bound", "csl"]
}"#;

#[test]
fn two_state_run_passes_with_one_row() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_config(tmp.path(), TWO_STATE, &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = report_rows(tmp.path());
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][1], "two_state");
    assert_eq!(rows[0][10], "true");

    let header = fs::read_to_string(tmp.path().join("out/report.csv")).unwrap();
    assert!(header.starts_with("run_id,system,M,tau,steps,D0,Dtau,gap_min,tau_max,tau_min,main_ok,decay_ok,margin\n"));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("out/report.json")).unwrap()).unwrap();
    let first = &json.as_array().unwrap()[0];
    assert!((first["D0"].as_f64().unwrap() - 1.5).abs() < 1e-14);
    assert!(first["tau_min"].as_f64().unwrap() <= 1.0);
}

#[test]
fn flow_on_spin_ring_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let json = r#"{
        "system": {"kind": "spin_ring", "size": 4, "coupling": 1.0},
        "protocol": {"kind": "linear", "gamma_from": 3.0, "gamma_to": 1.0, "u": 0.2, "tau": 1.0, "steps": 4}
    }"#;
    let out = run_config(tmp.path(), json, &[]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("protocol.u"), "{err}");
}

#[test]
fn malformed_json_reports_location() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_config(
        tmp.path(),
        "{\n  \"system\": {\"kind\": \"two_state\", \"rates\": [1.0, 2.0]},\n  oops\n}",
        &[],
    );
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn u_sweep_gap_is_nondecreasing() {
    let tmp = tempfile::tempdir().unwrap();
    let json = r#"{
        "system": {"kind": "ring", "size": 8},
        "protocol": {"kind": "constant", "gamma": 1.0, "tau": 1.0, "steps": 8},
        "initial": {"kind": "point_mass", "index": 0},
        "checks": ["gap_sweep"],
        "sweep": {"u": [0.0, 0.1, 0.2]}
    }"#;
    let out = run_config(tmp.path(), json, &["--jobs", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = report_rows(tmp.path());
    assert_eq!(rows.len(), 3);
    let gaps: Vec<f64> = rows.iter().map(|r| r[7].parse().unwrap()).collect();
    assert!(gaps.windows(2).all(|w| w[1] >= w[0] - 1e-10), "{gaps:?}");
    assert!(gaps[2] > gaps[0]);
}

#[test]
fn report_bytes_are_reproducible() {
    let json = r#"{
        "system": {"kind": "ring", "size": 6, "potential": {"form": "cosine", "amplitude": 1.0}},
        "protocol": {"kind": "linear", "gamma_from": 2.0, "gamma_to": 1.0, "tau": 1.0, "steps": 4, "substeps": 8},
        "checks": ["main_bound", "decay_bound", "c_dynamics", "db_relation"],
        "outputs": {"trajectory": "traj.csv"},
        "sweep": {"tau": [0.5, 1.0], "u": [0.0, 0.2]}
    }"#;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let oa = run_config(a.path(), json, &["--jobs", "4"]);
    let ob = run_config(b.path(), json, &["--jobs", "1"]);
    assert_ne!(oa.status.code(), Some(1), "{}", String::from_utf8_lossy(&oa.stderr));
    assert_eq!(oa.status.code(), ob.status.code());
    for f in [
        "report.csv",
        "report.json",
        "checks.csv",
        "r000_traj.csv",
        "r003_traj.diagnostics.csv",
    ] {
        let x = fs::read(a.path().join("out").join(f)).unwrap();
        let y = fs::read(b.path().join("out").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
    let body = |o: &Output| {
        let text = String::from_utf8_lossy(&o.stdout).into_owned();
        text.lines()
            .filter(|l| !l.contains("reports in"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(body(&oa), body(&ob));
}

#[test]
fn config_round_trip_is_idempotent() {
    let cfg = RunConfig::from_json(TWO_STATE).unwrap();
    let once = cfg.to_json();
    assert_eq!(RunConfig::from_json(&once).unwrap().to_json(), once);
}

#[test]
fn selftest_passes_and_is_deterministic() {
    let a = bin().arg("selftest").output().unwrap();
    let b = bin().arg("selftest").output().unwrap();
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stdout));
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn selftest_detects_injected_tolerance() {
    let out = bin()
        .args(["selftest", "--inject-tolerance", "1e-30"])
        .output()
        .unwrap();
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("[FAIL]"));
}

#[test]
fn version_flag() {
    let out = bin().arg("--version").output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains(env!("CARGO_PKG_VERSION")));
}
