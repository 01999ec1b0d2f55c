use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use kedmd::mpc::{read_trace_csv, TRACE_HEADER};
use kedmd_cli::manifest::{sha256_hex, RunManifest};
use serde_json::Value;

fn kedmd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kedmd"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn generate_vdp(dir: &Path) {
    let out = kedmd(dir, &["generate", "--system", "vdp", "--grid", "padua:25", "--rx", "auto", "--di", "25", "--seed", "1", "--out", "data/vdp"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn sidecar(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn generate_writes_expected_cluster_counts() {
    let dir = tempfile::tempdir().unwrap();
    generate_vdp(dir.path());
    let side = sidecar(&dir.path().join("data/vdp.json"));
    assert_eq!(side["centers"].as_array().unwrap().len(), 352);
    let out = kedmd(dir.path(), &["generate", "--system", "tanks", "--grid", "uniform:5", "--out", "data/tanks"]);
    assert_eq!(code(&out), 0);
    let side = sidecar(&dir.path().join("data/tanks.json"));
    assert_eq!(side["centers"].as_array().unwrap().len(), 626);
    let manifest = RunManifest::read(&dir.path().join("data/tanks.manifest.json")).unwrap();
    let bytes = fs::read(dir.path().join("data/tanks.csv")).unwrap();
    assert_eq!(manifest.output_hash("data/tanks.csv"), Some(sha256_hex(&bytes).as_str()));
}

#[test]
fn explicit_grid_without_origin_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("grid.csv"), "x1,x2\n1,1\n-1,0.5\n").unwrap();
    let out = kedmd(dir.path(), &["generate", "--system", "vdp", "--grid", "file:grid.csv", "--out", "d"]);
    assert_eq!(code(&out), 2);
    assert!(!dir.path().join("d.csv").exists());
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("gen.json"),
        r#"{"system": "vdp", "grid": "padua:10", "di": 5, "seed": 4, "out": "from_file"}"#,
    )
    .unwrap();
    let out = kedmd(dir.path(), &["generate", "--config", "gen.json", "--di", "7"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let side = sidecar(&dir.path().join("from_file.json"));
    assert_eq!(side["seed"], 4);
    assert!(side["samples_per_cluster"].as_array().unwrap().iter().all(|v| v == 7));
    fs::write(dir.path().join("bad.json"), r#"{"system": "vdp", "colour": 1}"#).unwrap();
    assert_eq!(code(&kedmd(dir.path(), &["generate", "--config", "bad.json"])), 2);
}

#[test]
fn fit_reports_origin_residual_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    generate_vdp(dir.path());
    let pi = kedmd(dir.path(), &["fit", "--data", "data/vdp", "--pi", "--out", "a.kedmd"]);
    assert_eq!(code(&pi), 0);
    assert!(stdout(&pi).contains("PI exactness          ok"));
    let again = kedmd(dir.path(), &["fit", "--data", "data/vdp", "--pi", "--out", "b.kedmd"]);
    assert_eq!(code(&again), 0);
    assert_eq!(fs::read(dir.path().join("a.kedmd")).unwrap(), fs::read(dir.path().join("b.kedmd")).unwrap());

    let plain = kedmd(dir.path(), &["fit", "--data", "data/vdp", "--out", "c.kedmd"]);
    assert_eq!(code(&plain), 0);
    let line = stdout(&plain).lines().find(|l| l.starts_with("origin residual")).unwrap().to_string();
    let residual: f64 = line.split_whitespace().last().unwrap().parse().unwrap();
    assert!(residual > 1e-10, "{residual}");
}

#[test]
fn singular_kernel_matrix_exits_with_numerics_code() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("near.csv"), "x1,x2\n0,0\n1e-9,0\n1,1\n-1,0.5\n").unwrap();
    assert_eq!(code(&kedmd(dir.path(), &["generate", "--system", "vdp", "--grid", "file:near.csv", "--out", "d"])), 0);
    let out = kedmd(dir.path(), &["fit", "--data", "d"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("regularization"));
    assert_eq!(code(&kedmd(dir.path(), &["fit", "--data", "d", "--lambda", "1e-6"])), 0);
}

#[test]
fn simulate_writes_trace_and_figures() {
    let dir = tempfile::tempdir().unwrap();
    generate_vdp(dir.path());
    assert_eq!(code(&kedmd(dir.path(), &["fit", "--data", "data/vdp", "--pi"])), 0);
    let out = kedmd(dir.path(), &["simulate", "--model", "data/vdp-pi.kedmd", "--steps", "40", "--out", "sim"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("mean solve time"));
    let sim = dir.path().join("sim");
    let rows = read_trace_csv(std::io::BufReader::new(fs::File::open(sim.join("trace.csv")).unwrap()), 2, 1).unwrap();
    assert_eq!(rows.len(), 40);
    assert!(rows.last().unwrap().x.iter().map(|v| v * v).sum::<f64>().sqrt() < 0.5);
    for f in ["error.svg", "phase.svg"] {
        assert!(fs::read_to_string(sim.join(f)).unwrap().contains("<polyline"));
    }
    let manifest = RunManifest::read(&sim.join("manifest.json")).unwrap();
    assert_eq!(manifest.outputs.len(), 3);
}

#[test]
fn zero_steps_give_header_only_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = kedmd(dir.path(), &["simulate", "--model", "truth", "--system", "tanks", "--steps", "0", "--out", "s"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("s/trace.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines, vec![TRACE_HEADER, "k,x1,x2,x3,x4,u1,u2,stage_cost,value,alpha_hat"]);
    assert!(!dir.path().join("s/phase.svg").exists());
}

#[test]
fn truth_model_needs_a_system() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&kedmd(dir.path(), &["simulate", "--model", "truth"])), 2);
    assert_eq!(code(&kedmd(dir.path(), &["simulate", "--model", "missing.kedmd"])), 1);
}

fn certificate(dir: &Path, args: &[&str]) -> Value {
    let out = kedmd(dir, args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out_dir = args.iter().position(|a| *a == "--out").map(|i| args[i + 1]).unwrap();
    serde_json::from_slice(&fs::read(dir.join(out_dir).join("certificate.json")).unwrap()).unwrap()
}

#[test]
fn exact_model_certifies_itself() {
    let dir = tempfile::tempdir().unwrap();
    let b = certificate(dir.path(), &["certify", "--model", "truth", "--system", "tanks", "--kappa-steps", "20", "--out", "c"]);
    assert_eq!(b["verdict"], "certified");
    assert_eq!(b["error_scan"]["c_x_hat"], 0.0);
    let sweep = b["margin_sweep"].as_array().unwrap();
    assert!(!sweep.is_empty());
    assert!(sweep.iter().all(|m| m["verdict"] == true && m["margin"].as_f64().unwrap() < 0.0));
    assert_eq!(b["alpha_sweep"].as_array().unwrap().len(), 29);
    for f in ["growth.csv", "scan.csv", "margins.csv", "manifest.json"] {
        assert!(dir.path().join("c").join(f).exists(), "{f}");
    }
}

#[test]
fn short_sweep_reports_insufficient_horizon() {
    let dir = tempfile::tempdir().unwrap();
    let b = certificate(dir.path(), &["certify", "--model", "truth", "--system", "vdp", "--n-bar", "30", "--kappa-steps", "5", "--out", "c"]);
    assert_eq!(b["verdict"], "horizon insufficient");
    assert!(b["margin"]["refused"].is_string());
    assert_eq!(b["margin"]["passed"], false);
    assert!(b["alpha_sweep"].as_array().unwrap().iter().all(|a| a["alpha"].as_f64().unwrap() <= 0.0));
}

#[test]
fn surrogate_certificate_records_bound_constants() {
    let dir = tempfile::tempdir().unwrap();
    generate_vdp(dir.path());
    assert_eq!(code(&kedmd(dir.path(), &["fit", "--data", "data/vdp", "--pi"])), 0);
    let b = certificate(
        dir.path(),
        &["certify", "--model", "data/vdp-pi.kedmd", "--test-resolution", "30", "--kappa-steps", "5", "--out", "c"],
    );
    let scan = &b["error_scan"];
    assert_eq!(scan["centers"], 352);
    assert!(scan["c_x_hat"].as_f64().unwrap() > 0.0);
    assert!(scan["origin_error"].as_f64().unwrap() <= 1e-10);
    assert_eq!(b["alpha_sweep_propagated"].as_array().unwrap().len(), 29);
}
