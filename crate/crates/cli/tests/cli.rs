use std::path::Path;
use std::process::Command;

fn etpart() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_etpart"));
    c.env("RUST_LOG", "warn");
    c
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        r#"
output_dir = "out"

[[sites]]
id = "S"
csv_path = "site.csv"
lat = 38.1
lon = -121.65
utc_offset = -8.0
flood_start = "2019-03-01"
greenup_date = "2019-03-05"
depth_groups = {{ "TW (mean)" = ["TW_1", "TW_2"] }}

[[models]]
name = "ols"
kind = "linear"

[rfe.spec]
name = "boost"
kind = "gbdt"
n_trees = 20

[cv]
k = 3
{extra}
"#
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn synth_then_run_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let s = etpart()
        .args(["synth", "--days", "20", "--seed", "3", "--out"])
        .arg(dir.path().join("site.csv"))
        .status()
        .unwrap();
    assert!(s.success());
    let cfg = write_config(dir.path(), "");
    let s = etpart().arg("run").arg("--config").arg(&cfg).args(["--jobs", "2"]).status().unwrap();
    assert_eq!(s.code(), Some(0));
    let out = dir.path().join("out");
    assert!(out.join("partition_S.csv").exists());
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"status\": \"complete\""));
    assert!(manifest.contains("\"S\": \""), "input checksum recorded");

    let s = etpart()
        .arg("report")
        .arg("--input")
        .arg(out.join("report.json"))
        .args(["--format", "csv", "--out"])
        .arg(dir.path().join("converted.csv"))
        .status()
        .unwrap();
    assert!(s.success());
    assert_eq!(
        std::fs::read(dir.path().join("converted.csv")).unwrap(),
        std::fs::read(out.join("report.csv")).unwrap()
    );
}

#[test]
fn stage_subcommand_stops_early() {
    let dir = tempfile::tempdir().unwrap();
    etpart()
        .args(["synth", "--days", "10", "--out"])
        .arg(dir.path().join("site.csv"))
        .status()
        .unwrap();
    let cfg = write_config(dir.path(), "");
    let s = etpart().arg("prep").arg("--config").arg(&cfg).status().unwrap();
    assert_eq!(s.code(), Some(0));
    assert!(dir.path().join("out/prepared_S.csv").exists());
    assert!(!dir.path().join("out/report.csv").exists());
}

#[test]
fn one_fold_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[[sites]]\nid = \"A\"\nsynthetic = { n_days = 5 }\n[cv]\nk = 1\n").unwrap();
    let s = etpart().arg("run").arg("--config").arg(&cfg).status().unwrap();
    assert_eq!(s.code(), Some(1));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let s = etpart().arg("run").arg("--config").arg(&cfg).status().unwrap();
    assert_eq!(s.code(), Some(2));
    assert!(std::fs::read_to_string(dir.path().join("out/manifest.json"))
        .unwrap()
        .contains("\"failed_stage\": \"ingest\""));
}

#[test]
fn unknown_flag_and_stage_are_usage_errors() {
    assert_eq!(etpart().args(["run", "--bogus"]).status().unwrap().code(), Some(1));
    assert_eq!(
        etpart().args(["run", "--config", "x.toml", "--stage", "nope"]).status().unwrap().code(),
        Some(1)
    );
    assert_eq!(etpart().arg("--help").output().unwrap().status.code(), Some(0));
}
