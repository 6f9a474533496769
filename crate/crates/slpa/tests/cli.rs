//! End-to-end checks of the command-line binary: exit codes, produced files,
//! and the run manifest.

use std::process::Command;

fn slpa() -> Command {
    Command::new(env!("CARGO_BIN_EXE_slpa"))
}

#[test]
fn help_exits_zero() {
    let out = slpa().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("slpa"));
}

#[test]
fn unknown_flag_exits_one() {
    let out = slpa().args(["synth", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_variant_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = slpa()
        .args([
            "train",
            "--data",
            "nowhere.epz",
            "--out",
            dir.path().to_str().unwrap(),
            "--variant",
            "NOPE",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_input_file_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = slpa()
        .args([
            "eval",
            "--checkpoint",
            "missing.slpa",
            "--data",
            "missing.epz",
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_writes_epochs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("run.toml");
    std::fs::write(
        &config_path,
        "[synth]\nn_subjects = 3\nn_tasks = 2\nepochs_per_cell = 2\nn_channels = 2\nn_time = 16\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = slpa()
        .args([
            "synth",
            "--config",
            config_path.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--seed",
            "7",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let ds = slpa::data::read_epochs(&out_dir.join("epochs.epz")).unwrap();
    assert_eq!(ds.len(), 12);
    assert_eq!(ds.n_time(), 16);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "synth");
    assert_eq!(manifest["seed"], 7);
    let sha = manifest["outputs"][0]["sha256"].as_str().unwrap();
    assert_eq!(sha.len(), 64);
}

#[test]
fn malformed_config_file_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("bad.toml");
    std::fs::write(&config_path, "not [valid toml").unwrap();
    let out = slpa()
        .args([
            "synth",
            "--config",
            config_path.to_str().unwrap(),
            "--out",
            dir.path().join("out").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
