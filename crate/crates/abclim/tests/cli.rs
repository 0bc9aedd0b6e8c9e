//! End-to-end checks of the `abclim` binary: artifact layout, determinism,
//! config validation, and meta round-trips.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_abclim"))
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("abclim_cli_{name}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

#[test]
fn classify_emits_expected_row_and_artifacts() {
    let out = tmp_dir("classify");
    let status = bin()
        .args(["classify", "--param", "mup", "--l", "3"])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(csv.contains("FeatureLearning"));
    assert!(csv.lines().nth(1).unwrap().starts_with("0,"), "r = 0 leads the row: {csv}");
    let meta = std::fs::read_to_string(out.join("meta.json")).unwrap();
    assert!(meta.contains("\"command\": \"classify\""));
}

#[test]
fn identical_runs_are_byte_identical_and_meta_round_trips() {
    let out1 = tmp_dir("det1");
    let out2 = tmp_dir("det2");
    let args = [
        "train-finite",
        "--param",
        "ntp",
        "--l",
        "2",
        "--n",
        "64",
        "--phi",
        "tanh",
        "--eta",
        "0.5",
        "--steps",
        "4",
        "--probe",
        "1.0",
        "--seed",
        "11",
    ];
    assert!(bin().args(args).arg("--out").arg(&out1).status().unwrap().success());
    assert!(bin().args(args).arg("--out").arg(&out2).status().unwrap().success());
    let a = std::fs::read(out1.join("results.csv")).unwrap();
    let b = std::fs::read(out2.join("results.csv")).unwrap();
    assert_eq!(a, b, "identical configs must produce byte-identical results");
    // Re-ingest meta.json: identical again.
    let out3 = tmp_dir("det3");
    assert!(bin()
        .arg("--config")
        .arg(out1.join("meta.json"))
        .arg("--out")
        .arg(&out3)
        .status()
        .unwrap()
        .success());
    let c = std::fs::read(out3.join("results.csv")).unwrap();
    assert_eq!(a, c, "meta.json round-trip must reproduce the run");
}

#[test]
fn missing_seed_is_a_config_error() {
    let out = tmp_dir("noseed");
    let output = bin()
        .args(["train-finite", "--param", "mup", "--l", "1", "--n", "8", "--steps", "2"])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(!output.status.success());
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(err.contains("seed"), "stderr should say the seed is required: {err}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let out = tmp_dir("badcfg");
    std::fs::create_dir_all(&out).unwrap();
    let cfg = out.join("bad.json");
    std::fs::write(
        &cfg,
        r#"{"command": "classify", "param": {"name": "mup", "l": 2}, "extra": 1}"#,
    )
    .unwrap();
    let output = bin().arg("--config").arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert!(!output.status.success());
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(err.contains("invalid config"), "{err}");
}

#[test]
fn rationals_render_as_fraction_strings_in_meta() {
    let out = tmp_dir("rat");
    assert!(bin()
        .args(["classify", "--param", "sp", "--l", "2", "--c", "1/2"])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap()
        .success());
    let meta = std::fs::read_to_string(out.join("meta.json")).unwrap();
    assert!(meta.contains("\"1/2\""), "{meta}");
}
