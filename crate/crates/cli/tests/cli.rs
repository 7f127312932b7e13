use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn cweyl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cweyl")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Shrinks the semiclassical example to a quick run.
fn small_semiclassical(dir: &Path) -> PathBuf {
    let mut cfg: Value = serde_json::from_str(&fs::read_to_string(config("f2_semiclassical.json")).unwrap()).unwrap();
    cfg["experiment"]["h_list"] = serde_json::json!([0.2, 0.15]);
    cfg["experiment"]["trials"] = serde_json::json!(2);
    let path = dir.join("small.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn roots_reports_a_pair_over_half() {
    let c = config("f2_semiclassical.json");
    let text = ok(&cweyl(&["roots", "--config", c.to_str().unwrap(), "--z", "0.5,0"]));
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["beta"], 1);
    assert_eq!(v["gamma"], 1);
    let xi = v["roots"][1]["point"]["xi"].as_f64().unwrap();
    assert!((xi - 1.5f64.sqrt()).abs() < 1e-10);
}

#[test]
fn negative_coordinates_parse() {
    let c = config("f2_semiclassical.json");
    ok(&cweyl(&["roots", "--config", c.to_str().unwrap(), "--z", "-0.2,-0.1"]));
}

#[test]
fn weyl_prediction_uses_h() {
    let c = config("f2_semiclassical.json");
    let v: Value = serde_json::from_str(&ok(&cweyl(&["weyl", "--config", c.to_str().unwrap(), "--h", "0.05"]))).unwrap();
    let m = v["measure"].as_f64().unwrap();
    assert_eq!(v["prediction"].as_f64().unwrap(), m / (std::f64::consts::TAU * 0.05));
}

#[test]
fn assemble_and_spectrum_write_files() {
    let dir = tempfile::tempdir().unwrap();
    let c = config("f2_semiclassical.json");
    let c = c.to_str().unwrap();
    let m = dir.path().join("p.txt");
    ok(&cweyl(&["assemble", "--config", c, "--h", "0.2", "--K", "10", "--out", m.to_str().unwrap()]));
    let back = cweyl::discretize::read_matrix(std::io::BufReader::new(fs::File::open(&m).unwrap())).unwrap();
    assert_eq!(back.dim(), 21);

    let out = dir.path().join("spec");
    ok(&cweyl(&["spectrum", "--config", c, "--h", "0.2", "--delta", "1e-4", "--out", out.to_str().unwrap()]));
    let info: Value = serde_json::from_str(&fs::read_to_string(out.join("spectrum.json")).unwrap()).unwrap();
    let rows = fs::read_to_string(out.join("eigenvalues.csv")).unwrap().lines().count() - 1;
    assert_eq!(rows as u64, info["dim"].as_u64().unwrap());
}

#[test]
fn pseudospec_and_scan_fill_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let c = config("f2_semiclassical.json");
    let c = c.to_str().unwrap();
    let p = dir.path().join("ps");
    ok(&cweyl(&["pseudospec", "--config", c, "--h", "0.2", "--grid", "-0.5:0.5:4,-0.5:0.5:3", "--out", p.to_str().unwrap()]));
    assert_eq!(fs::read_to_string(p.join("sigma_min.csv")).unwrap().lines().count(), 13);
    let s = dir.path().join("scan");
    ok(&cweyl(&["symbol-scan", "--config", c, "--grid", "3x2", "--out", s.to_str().unwrap()]));
    let text = fs::read_to_string(s.join("region_map.csv")).unwrap();
    assert_eq!(text.lines().count(), 7);
    assert!(text.lines().skip(1).all(|l| l.contains(",lambda,1,1")), "{text}");
}

#[test]
fn quasimode_writes_samples() {
    let dir = tempfile::tempdir().unwrap();
    let c = config("f2_semiclassical.json");
    let q = dir.path().join("q");
    ok(&cweyl(&["quasimode", "--config", c.to_str().unwrap(), "--z", "0.5,0", "--h", "0.1", "--out", q.to_str().unwrap()]));
    let info: Value = serde_json::from_str(&fs::read_to_string(q.join("quasimode.json")).unwrap()).unwrap();
    assert!(info["residual"].as_f64().unwrap() < 0.05);
    assert!(fs::read_to_string(q.join("quasimode.csv")).unwrap().starts_with("x,re_0,im_0"));
}

#[test]
fn monte_carlo_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_semiclassical(dir.path());
    let cfg = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&cweyl(&["mc-semiclassical", "--config", cfg, "--out", a.to_str().unwrap()]));
    ok(&cweyl(&["mc-semiclassical", "--config", cfg, "--out", b.to_str().unwrap()]));
    assert_eq!(fs::read(a.join("trials.csv")).unwrap(), fs::read(b.join("trials.csv")).unwrap());
    assert!(a.join("summary.json").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = cweyl(&["roots", "--config", "/nonexistent.json", "--z", "0,0"]);
    assert_eq!(missing.status.code(), Some(2));

    let cfg = small_semiclassical(dir.path());
    let wrong_mode = cweyl(&["mc-highenergy", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(wrong_mode.status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"symbol": {"n": 1, "m": 1, "coeffs": [[], []]}, "perturbation": {"alpha_min": 0, "alpha_max": 0, "rho": 1.2}, "domains": []}"#).unwrap();
    let not_elliptic = cweyl(&["roots", "--config", bad.to_str().unwrap(), "--z", "0,0"]);
    assert_eq!(not_elliptic.status.code(), Some(2));

    // no plus root over a point outside Σ
    let c = config("f2_semiclassical.json");
    let q = cweyl(&["quasimode", "--config", c.to_str().unwrap(), "--z", "5,5", "--h", "0.1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(q.status.code(), Some(2));
}
