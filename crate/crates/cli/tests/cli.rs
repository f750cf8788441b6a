//! Runs the `star` binary.

use std::process::Command;

fn star() -> Command {
    Command::new(env!("CARGO_BIN_EXE_star"))
}

#[test]
fn show_config_applies_overrides() {
    let out = star().args(["--seed", "7", "--nfe", "3", "show-config"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("seed = 7"));
    assert!(text.contains("nfe = 3"));
}

#[test]
fn unknown_override_is_rejected() {
    let out = star().args(["--set", "flow.nope=1", "show-config"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn stage2_without_stage1_reports_the_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = star().arg("--out").arg(dir.path()).arg("stage2").output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("missing artifact"), "{err}");
}
