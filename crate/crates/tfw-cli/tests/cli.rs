//! End-to-end checks of the `tfw` binary: exit codes, artifact layout, and
//! the config schema guard.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tfw() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tfw"))
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn validate_config_names_the_unknown_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    write(&cfg, r#"{"grid": {"n": 16, "L": 4.0}, "grd": 1}"#);
    let out = tfw().arg("validate-config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("grd"), "{}", stderr(&out));
}

#[test]
fn validate_config_accepts_a_sound_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("good.json");
    write(
        &cfg,
        r#"{"grid": {"n": 16, "L": 4.0}, "nuclei": {"background": 1.0}}"#,
    );
    let out = tfw().arg("validate-config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("config ok"), "{}", stdout(&out));
}

#[test]
fn usage_errors_print_the_schema() {
    let out = tfw().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Config schema"), "{}", stderr(&out));
}

#[test]
fn solve_writes_fields_state_and_hashed_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("homo.json");
    write(
        &cfg,
        r#"{"grid": {"n": 16, "L": 4.0}, "nuclei": {"background": 1.0}}"#,
    );
    let outdir = dir.path().join("run");
    let out = tfw()
        .args(["solve", "--config"])
        .arg(&cfg)
        .arg("--output")
        .arg(&outdir)
        .args(["--threads", "2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}\n{}", stdout(&out), stderr(&out));

    for file in ["u.tfwf", "phi.tfwf", "state.json", "config.json", "report.json"] {
        assert!(outdir.join(file).exists(), "missing {file}");
    }

    let state: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(outdir.join("state.json")).unwrap()).unwrap();
    let theta = state["theta"].as_f64().unwrap();
    assert!((theta - 5.0 / 3.0).abs() <= 1e-9, "theta = {theta}");

    let u = tfw::io::load_field(&outdir.join("u.tfwf")).unwrap();
    assert!(u.mapped(|v| v - 1.0).sup_norm() <= 1e-8);

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(outdir.join("report.json")).unwrap()).unwrap();
    let artifacts = report["artifacts"].as_object().unwrap();
    assert!(artifacts.len() >= 4);
    for (file, recorded) in artifacts {
        let on_disk = tfw::io::hash_file(&outdir.join(file)).unwrap();
        assert_eq!(recorded.as_str().unwrap(), on_disk, "{file}");
    }
}

#[test]
fn the_environment_variable_sets_the_default_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("homo.json");
    write(
        &cfg,
        r#"{"grid": {"n": 16, "L": 4.0}, "nuclei": {"background": 1.0}}"#,
    );
    let root = dir.path().join("artifacts");
    let out = tfw()
        .args(["solve", "--config"])
        .arg(&cfg)
        .env("TFW_OUTPUT_DIR", &root)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(root.join("solve").join("report.json").exists());
}

#[test]
fn locality_reports_a_positive_decay_rate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("lattice.json");
    write(
        &cfg,
        r#"{
            "grid": {"n": 32, "L": 8.0},
            "nuclei": {"r0": 0.75, "lattice": 2},
            "experiment": {"name": "locality", "fit_window": [1.5, 3.3]}
        }"#,
    );
    let outdir = dir.path().join("run");
    let out = tfw()
        .args(["locality", "--config"])
        .arg(&cfg)
        .arg("--output")
        .arg(&outdir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}\n{}", stdout(&out), stderr(&out));

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(outdir.join("report.json")).unwrap()).unwrap();
    let gamma = report["fits"]["w"]["gamma"].as_f64().unwrap();
    assert!(gamma > 0.0, "gamma = {gamma}");
    assert!(outdir.join("curve_w.csv").exists());
}

#[test]
fn threshold_failures_exit_two_but_still_write_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("defect.json");
    // A single short-range run cannot push the final-ball residual down to
    // the declared threshold, so the report must fail some check.
    write(
        &cfg,
        r#"{
            "grid": {"n": 16, "L": 4.0},
            "nuclei": {"r0": 0.6, "coords": [[2.0, 2.0, 2.0]]},
            "experiment": {"displace_offset": [0.3, 0.0, 0.0], "radii": [0.5, 0.9, 1.3]}
        }"#,
    );
    let outdir = dir.path().join("run");
    let out = tfw()
        .args(["neutrality", "--config"])
        .arg(&cfg)
        .arg("--output")
        .arg(&outdir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}\n{}", stdout(&out), stderr(&out));
    assert!(outdir.join("report.json").exists());
    assert!(stdout(&out).contains("FAIL"), "{}", stdout(&out));
}

#[test]
fn a_config_for_another_experiment_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("mismatch.json");
    write(
        &cfg,
        r#"{"grid": {"n": 16, "L": 4.0}, "nuclei": {"background": 1.0},
            "experiment": {"name": "screening"}}"#,
    );
    let out = tfw().args(["locality", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("screening"), "{}", stderr(&out));
}
