use std::path::Path;
use std::process::Command;

use mkvlab::{emit_report, parse_config, run_experiment, CliError};
use mkvlab_core::io::read_ensemble_csv;
use mkvlab_core::paths::PathKind;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mkvlab"));
    c.env_remove("MKVLAB_SEED");
    c
}

fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

const SMALL_SIM: &str = r#"{
  "kind": "simulate",
  "seed": 7,
  "grid": {"horizon": 1.0, "n_steps": 20},
  "drift": {"name": "sine_interaction", "kappa": 1.0, "dim": 1},
  "noise": {"type": "brownian", "dim": 1},
  "initial": {"type": "gaussian", "mean": [0.0], "sd": 1.0},
  "n": 12
}"#;

fn deterministic_config(drift: &str, values: &[f64]) -> String {
    let vals: Vec<String> = values.iter().map(|v| format!("[{v}]")).collect();
    format!(
        r#"{{
  "kind": "simulate",
  "seed": 1,
  "grid": {{"horizon": 1.0, "n_steps": {}}},
  "drift": {drift},
  "noise": {{"type": "deterministic", "dim": 1, "values": [{}]}},
  "initial": {{"type": "point", "value": [0.25]}},
  "n": 3
}}"#,
        values.len() - 1,
        vals.join(", ")
    )
}

#[test]
fn zero_drift_returns_initial_plus_driver() {
    let tmp = tempfile::tempdir().unwrap();
    let values = [0.0, 0.5, -0.25, 1.0, 0.75];
    let cfg = parse_config(&deterministic_config(r#"{"name": "zero", "dim": 1}"#, &values)).unwrap();
    run_experiment(&cfg, tmp.path()).unwrap();
    let out = read_ensemble_csv(tmp.path().join("ensemble.csv"), PathKind::Continuous).unwrap();
    for member in out.iter() {
        for (j, v) in values.iter().enumerate() {
            assert_eq!(member.at(j)[0], 0.25 + v);
        }
    }
}

#[test]
fn constant_drift_adds_linear_term() {
    let tmp = tempfile::tempdir().unwrap();
    let values = [0.0, 0.1, 0.3, -0.2];
    let cfg = parse_config(&deterministic_config(r#"{"name": "constant", "value": [2.0]}"#, &values)).unwrap();
    run_experiment(&cfg, tmp.path()).unwrap();
    let out = read_ensemble_csv(tmp.path().join("ensemble.csv"), PathKind::Continuous).unwrap();
    let h = 1.0 / 3.0;
    for member in out.iter() {
        for (j, v) in values.iter().enumerate() {
            let expected = 0.25 + 2.0 * h * j as f64 + v;
            assert!((member.at(j)[0] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn malformed_config_exits_with_code_2_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.json", r#"{"kind": "simulate", "seed": 1"#);
    let out_dir = tmp.path().join("out");
    let status = bin().arg("run").arg(&cfg).arg("--out").arg(&out_dir).status().unwrap();
    assert_eq!(status.code(), Some(2));
    assert!(!out_dir.exists());
}

#[test]
fn invalid_parameter_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let body = SMALL_SIM.replace(r#""n": 12"#, r#""n": 0"#);
    let cfg = write(tmp.path(), "zero.json", &body);
    let out_dir = tmp.path().join("out");
    let status = bin().arg("run").arg(&cfg).arg("--out").arg(&out_dir).status().unwrap();
    assert_eq!(status.code(), Some(2));
    assert!(!out_dir.exists());
}

#[test]
fn failed_invariant_exits_with_code_4() {
    let tmp = tempfile::tempdir().unwrap();
    let body = r#"{
  "kind": "lln",
  "seed": 3,
  "grid": {"horizon": 1.0, "n_steps": 1},
  "law": "rademacher",
  "n_min": 10,
  "n_max": 20,
  "n_step": 10,
  "exponent": 5.0
}"#;
    let cfg = write(tmp.path(), "lln.json", body);
    let out_dir = tmp.path().join("out");
    let status = bin().arg("run").arg(&cfg).arg("--out").arg(&out_dir).status().unwrap();
    assert_eq!(status.code(), Some(4));
    // the manifest still records the failure
    let summary = emit_report(&out_dir).unwrap();
    assert!(!summary.all_ok);
    assert_eq!(summary.runs[0].status, "invariant_violation");
}

#[test]
fn reruns_are_byte_identical_across_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "sim.json", SMALL_SIM);
    let mut outputs = Vec::new();
    for (k, workers) in ["1", "3", "1"].iter().enumerate() {
        let out_dir = tmp.path().join(format!("run{k}"));
        let status = bin()
            .arg("run")
            .arg(&cfg)
            .args(["--workers", workers])
            .arg("--out")
            .arg(&out_dir)
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
        outputs.push(std::fs::read(out_dir.join("ensemble.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn seed_override_changes_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "sim.json", SMALL_SIM);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(bin().arg("run").arg(&cfg).arg("--out").arg(&a).status().unwrap().code(), Some(0));
    let status = bin().env("MKVLAB_SEED", "8").arg("run").arg(&cfg).arg("--out").arg(&b).status().unwrap();
    assert_eq!(status.code(), Some(0));
    assert_ne!(std::fs::read(a.join("ensemble.csv")).unwrap(), std::fs::read(b.join("ensemble.csv")).unwrap());
    let bad = bin().env("MKVLAB_SEED", "abc").arg("run").arg(&cfg).arg("--out").arg(tmp.path().join("c")).status().unwrap();
    assert_eq!(bad.code(), Some(2));
}

#[test]
fn report_on_empty_directory_fails() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(matches!(emit_report(tmp.path()), Err(CliError::MissingArtifact(_))));
    let status = bin().arg("report").arg(tmp.path()).status().unwrap();
    assert_ne!(status.code(), Some(0));
}

#[test]
fn report_lists_runs_and_clt_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = parse_config(SMALL_SIM).unwrap();
    run_experiment(&sim, &tmp.path().join("sim")).unwrap();
    let summary = emit_report(&tmp.path().join("sim")).unwrap();
    assert_eq!(summary.runs.len(), 1);
    assert!(summary.all_ok);

    let clt = parse_config(
        r#"{
  "kind": "clt",
  "seed": 9,
  "grid": {"horizon": 1.0, "n_steps": 5},
  "drift": {"name": "mean_reversion", "alpha": 1.0, "dim": 1},
  "noise": {"type": "brownian", "dim": 1},
  "phi": {"type": "linear", "a": [1.0]},
  "n": 32,
  "replicas": 200,
  "reference_m": 256,
  "variance_members": 128,
  "max_relative_error": 1.0,
  "ks_level": 0.0
}"#,
    )
    .unwrap();
    run_experiment(&clt, &tmp.path().join("clt")).unwrap();
    let summary = emit_report(tmp.path()).unwrap();
    assert_eq!(summary.runs.len(), 2);
    let entry = summary.runs.iter().find(|r| r.kind == "clt").unwrap();
    for key in ["sigma2", "mc_variance", "ks_p_value"] {
        assert!(entry.metrics.get(key).and_then(|v| v.as_f64()).is_some(), "{key}");
    }
    assert!(tmp.path().join("report.json").is_file());
}
