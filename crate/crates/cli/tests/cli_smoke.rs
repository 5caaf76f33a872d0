//! Drives the crosstime binary: exit codes, error reports, and the fast
//! leading stages. Full runs live in the core crate's integration tests.

use std::path::Path;
use std::process::Command;

fn crosstime() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_crosstime"));
    cmd.env_remove("CROSSTIME_OUT_DIR");
    cmd
}

fn error_kind(dir: &Path) -> String {
    let text = std::fs::read_to_string(dir.join("error.json")).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value["kind"].as_str().unwrap().to_string()
}

#[test]
fn leading_stages_run_from_the_builtin_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");

    let status = crosstime()
        .args(["synth", "--seed", "5"])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("synth/tracks.csv").is_file());
    assert!(out.join("synth/spat.csv").is_file());
    assert!(out.join("synth/manifest.json").is_file());
    assert!(
        out.join("config.json").is_file(),
        "generated config is snapshotted"
    );

    let status = crosstime()
        .args(["preprocess", "--seed", "5"])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("preprocess/trajectories.csv").is_file());

    // The snapshot is a loadable config for the same run.
    let status = crosstime()
        .arg("classify")
        .arg("--config")
        .arg(out.join("config.json"))
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("classify/labeled_features.csv").is_file());
}

#[test]
fn missing_upstream_artifacts_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fresh");
    let status = crosstime()
        .arg("evaluate")
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
    assert_eq!(error_kind(&out), "missing_artifact");
}

#[test]
fn bad_configs_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("broken.json");
    std::fs::write(&config_path, "{ not json").unwrap();
    let out = dir.path().join("out");
    let status = crosstime()
        .arg("synth")
        .arg("--config")
        .arg(&config_path)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    assert_eq!(error_kind(&out), "config");

    // No config source at all is also a usage error, reported on stderr.
    let output = crosstime().arg("synth").output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("CROSSTIME_OUT_DIR"), "stderr: {stderr}");
}

#[test]
fn init_writes_an_editable_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    let status = crosstime()
        .arg("init")
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("artifacts"))
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&path).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(value["seed"], 0);
    assert!(value["synth"].is_object());
    assert_eq!(value["train"]["batch_size"], 30);
}
