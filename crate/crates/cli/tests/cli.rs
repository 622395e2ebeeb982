use std::path::Path;
use std::process::{Command, Output};

fn netseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_netseg")).current_dir(dir).args(args).output().unwrap()
}

#[test]
fn help_exits_zero_and_bad_flags_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(netseg(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(netseg(dir.path(), &["train", "--help"]).status.code(), Some(0));
    assert_eq!(netseg(dir.path(), &["phantom", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(netseg(dir.path(), &["phantom", "--jobs", "0", "--out", "x"]).status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"count": 2, "colour": "red"}"#).unwrap();
    let out = netseg(dir.path(), &["phantom", "--config", "c.json", "--dry-run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}

#[test]
fn config_values_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"count": 2, "seed": 4}"#).unwrap();
    let out = netseg(dir.path(), &["phantom", "--config", "c.json", "--count", "3", "--dry-run"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["count"], 3);
    assert_eq!(v["seed"], 4);
    assert!(!dir.path().join("netseg_out").exists());
}

#[test]
fn eval_of_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let gen = netseg(dir.path(), &["phantom", "--count", "1", "--shape", "12,16,16", "--out", "c"]);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    let seg = std::fs::read_dir(dir.path().join("c"))
        .unwrap()
        .flatten()
        .map(|e| e.path())
        .find(|p| p.to_string_lossy().ends_with("_seg.nii"))
        .unwrap();
    let seg = seg.to_str().unwrap();
    let out = netseg(dir.path(), &["eval", "--pred", seg, "--gt", seg, "--out", "e"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("e/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["mean_dice"], 1.0);
}

#[test]
fn extract_with_mismatched_truth_fails_with_shape_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let ok = |o: Output| assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    ok(netseg(dir.path(), &["phantom", "--count", "2", "--shape", "12,16,16", "--out", "a"]));
    ok(netseg(dir.path(), &["phantom", "--count", "2", "--shape", "12,16,20", "--out", "b"]));
    ok(netseg(dir.path(), &["compose", "--data", "a", "--to-schema", "brats2018", "--out", "a18"]));
    let out = netseg(dir.path(), &["extract", "--data", "a18", "--truth", "b", "--out", "x"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ShapeMismatch"));
}

#[test]
fn oracle_extraction_recovers_planted_net() {
    let dir = tempfile::tempdir().unwrap();
    let ok = |o: Output| assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    ok(netseg(dir.path(), &["phantom", "--count", "3", "--shape", "16,32,32", "--out", "a"]));
    ok(netseg(dir.path(), &["compose", "--data", "a", "--to-schema", "brats2018", "--out", "a18"]));
    ok(netseg(dir.path(), &["extract", "--data", "a18", "--truth", "a", "--out", "x"]));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("x/extraction.json")).unwrap()).unwrap();
    assert_eq!(report.as_array().map(Vec::len), Some(3), "{report}");
}
