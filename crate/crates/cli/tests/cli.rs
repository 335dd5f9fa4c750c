//! Command-line behaviour: exit codes, error messages and file handling.

use std::path::Path;
use std::process::{Command, Output};

fn motpred(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_motpred"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = motpred(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr(&o).lines().count(), 1);
}

#[test]
fn help_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let o = motpred(dir.path(), &["--help"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("compare"));
}

#[test]
fn generate_needs_a_seed_and_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let o = motpred(dir.path(), &["generate", "--out", "s"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: no seed"));

    assert!(motpred(dir.path(), &["generate", "--seed", "1", "--out", "s"])
        .status
        .success());
    let again = motpred(dir.path(), &["generate", "--seed", "1", "--out", "s"]);
    assert_eq!(again.status.code(), Some(1));
    assert!(stderr(&again).contains("--force"));
    assert!(
        motpred(dir.path(), &["generate", "--seed", "1", "--out", "s", "--force"])
            .status
            .success()
    );
}

#[test]
fn learned_tracking_without_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    assert!(motpred(dir.path(), &["generate", "--seed", "2", "--out", "s"])
        .status
        .success());
    let o = motpred(
        dir.path(),
        &["track", "s", "--motion-model", "learned", "--out", "r.txt"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checkpoint"));
    let o = motpred(
        dir.path(),
        &["track", "s", "--motion-model", "newtonian", "--out", "r.txt"],
    );
    assert!(stderr(&o).contains("unknown motion model"));
}

#[test]
fn kalman_track_then_eval_scores_the_results() {
    let dir = tempfile::tempdir().unwrap();
    assert!(motpred(dir.path(), &["generate", "--seed", "3", "--out", "s"])
        .status
        .success());
    assert!(motpred(dir.path(), &["track", "s", "--out", "r.txt"]).status.success());
    let o = motpred(dir.path(), &["eval", "s", "r.txt", "--format", "csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().next().unwrap().contains("MOTA"));

    let perfect = motpred(dir.path(), &["eval", "s", "s/gt.txt", "--format", "csv"]);
    assert!(perfect.status.success());
    let missing = motpred(dir.path(), &["eval", "s", "nope.txt"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(stderr(&missing).contains("not found"));
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[train]\nbeta = -1.0\n").unwrap();
    let o = motpred(
        dir.path(),
        &["--config", "bad.toml", "generate", "--seed", "1", "--out", "s"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"));
    std::fs::write(dir.path().join("typo.toml"), "sed = 1\n").unwrap();
    let o = motpred(dir.path(), &["--config", "typo.toml", "generate"]);
    assert_eq!(o.status.code(), Some(1));
}
