use std::path::Path;

use etpart::config::RunConfig;
use etpart::pipeline::{run_pipeline, RunOptions, Stage};

fn config(out: &Path) -> RunConfig {
    let text = format!(
        r#"
output_dir = "{}"

[[sites]]
id = "A"
synthetic = {{ n_days = 20, seed = 1 }}

[[sites]]
id = "B"
synthetic = {{ n_days = 20, seed = 2, latitude = 38.05 }}

[[models]]
name = "ols"
kind = "linear"

[[models]]
name = "boost"
kind = "gbdt"
n_trees = 30

[cv]
k = 3
seed = 7

[rfe.spec]
name = "boost"
kind = "gbdt"
n_trees = 30

[report]
include_wall_time = false
"#,
        out.display()
    );
    RunConfig::from_toml(&text).unwrap()
}

#[test]
fn full_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let s = run_pipeline(&cfg, "", &RunOptions::default()).unwrap();
    assert_eq!(s.stages_completed, Stage::ALL.to_vec());
    for name in [
        "report.csv",
        "report.json",
        "feature_sets.json",
        "plotdata_comparison.csv",
        "rfe_A.json",
        "rfe_B.json",
        "plotdata_rfe_A.csv",
        "partition_A.csv",
        "partition_B.csv",
        "validation_A.json",
        "model_B.json",
        "manifest.json",
    ] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "complete");
    assert_eq!(manifest["seed"], 7);
    assert!(manifest["artifacts"]["report.csv"].as_str().unwrap().len() == 64);
    let f_rfe = s.f_rfe.unwrap();
    assert!(!f_rfe.features().is_empty());
    let report = s.report.unwrap();
    assert!(report.cells.iter().any(|c| c.feature_set == "F_RFE"));
    assert!(report.cells.iter().all(|c| c.wall_time_seconds == 0.0));
}

#[test]
fn stop_after_compare() {
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        stop_after: Some(Stage::Compare),
        ..Default::default()
    };
    let s = run_pipeline(&config(dir.path()), "", &opts).unwrap();
    assert_eq!(s.stages_completed.last(), Some(&Stage::Compare));
    assert!(dir.path().join("report.csv").exists());
    assert!(!dir.path().join("partition_A.csv").exists());
}

#[test]
fn seed_override_lands_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        seed: Some(99),
        stop_after: Some(Stage::Features),
        ..Default::default()
    };
    run_pipeline(&config(dir.path()), "", &opts).unwrap();
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 99);
    assert_eq!(m["stages_completed"].as_array().unwrap().len(), 4);
}

#[test]
fn missing_csv_is_a_stage_failure() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.sites[0].synthetic = None;
    cfg.sites[0].csv_path = Some(dir.path().join("nope.csv"));
    cfg.sites[0].lat = Some(38.0);
    cfg.sites[0].lon = Some(-121.0);
    let err = run_pipeline(&cfg, "", &RunOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert_eq!(err.stage(), Some(Stage::Ingest));
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["status"], "incomplete");
    assert_eq!(m["failed_stage"], "ingest");
}

#[test]
fn bad_config_is_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.cv.k = 1;
    assert_eq!(run_pipeline(&cfg, "", &RunOptions::default()).unwrap_err().exit_code(), 1);
}

#[test]
fn guide_config_example_parses() {
    let md = include_str!("../../../book/src/pipeline.md");
    let start = md.find("```toml\n").unwrap() + "```toml\n".len();
    let end = start + md[start..].find("```").unwrap();
    let cfg = RunConfig::from_toml(&md[start..end]).unwrap();
    assert_eq!(cfg.sites.len(), 2);
    assert_eq!(cfg.models[0].name, "lgbm");
}
