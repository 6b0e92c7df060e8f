use std::fs;
use std::path::Path;
use std::process::Command;

use stanncr_cli::config::SweepParam;
use stanncr_cli::pipeline::file_digest;
use stanncr_cli::{compare_encoders, run_pipeline, sweep, Method, PipelineConfig, RunOptions, Stage};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stanncr"))
}

fn write_config(dir: &Path, cfg: &PipelineConfig) -> std::path::PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

#[test]
fn identical_configs_give_byte_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::default_synth();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_pipeline(&cfg, &RunOptions::new(&a)).unwrap();
    run_pipeline(&cfg, &RunOptions::new(&b)).unwrap();
    assert_eq!(
        file_digest(&a.join("metrics.json")).unwrap(),
        file_digest(&b.join("metrics.json")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("confusion.csv")).unwrap(),
        fs::read(b.join("confusion.csv")).unwrap()
    );
}

#[test]
fn cached_rerun_reuses_stages_and_reproduces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::default_synth();
    let cache = tmp.path().join("cache");
    let first = run_pipeline(
        &cfg,
        &RunOptions {
            cache: Some(cache.clone()),
            ..RunOptions::new(tmp.path().join("a"))
        },
    )
    .unwrap();
    let second = run_pipeline(
        &cfg,
        &RunOptions {
            cache: Some(cache),
            ..RunOptions::new(tmp.path().join("b"))
        },
    )
    .unwrap();
    assert!(first.stages.iter().all(|r| !r.cached));
    assert!(second
        .stages
        .iter()
        .filter(|r| !matches!(r.stage, Stage::Dataset | Stage::Classify))
        .all(|r| r.cached));
    assert_eq!(
        fs::read(tmp.path().join("a/metrics.json")).unwrap(),
        fs::read(tmp.path().join("b/metrics.json")).unwrap()
    );
}

#[test]
fn out_of_range_beta_exits_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::default_synth();
    cfg.stgnmf.beta = 1.3;
    let path = write_config(tmp.path(), &cfg);
    let status = bin()
        .args(["pipeline", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(tmp.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    assert!(!tmp.path().join("out/metrics.json").exists());
}

#[test]
fn unknown_config_key_exits_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&PipelineConfig::default_synth().to_json()).unwrap();
    value["stgnmf"]["lamda"] = serde_json::json!(0.1);
    let path = tmp.path().join("config.json");
    fs::write(&path, value.to_string()).unwrap();
    let out = bin().args(["pipeline", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda"));
}

#[test]
fn missing_dataset_file_exits_with_runtime_code() {
    let tmp = tempfile::tempdir().unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&PipelineConfig::default_synth().to_json()).unwrap();
    value["dataset"] = serde_json::json!({"source": "file", "path": tmp.path().join("absent.json")});
    let path = tmp.path().join("config.json");
    fs::write(&path, value.to_string()).unwrap();
    let status = bin()
        .args(["pipeline", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(tmp.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn staged_subcommand_stops_after_its_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let status = bin().args(["encode", "--out"]).arg(&out).status().unwrap();
    assert!(status.success());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("run_report.json")).unwrap()).unwrap();
    assert!(report["metrics"].is_null());
    assert!(!out.join("metrics.json").exists());
    let stages: Vec<&str> = report["stages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["stage"].as_str().unwrap())
        .collect();
    assert!(!stages.contains(&"train"));
    assert!(stages.contains(&"encode"));
}

#[test]
fn sweep_writes_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::default_synth();
    let values = [0.0, 0.6, 1.0];
    let report = sweep(&cfg, SweepParam::Beta, &values, tmp.path(), None).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert!(values.contains(&report.best_value));
    let csv = fs::read_to_string(tmp.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("beta,"));
}

#[test]
fn sweep_cli_rejects_unknown_parameter() {
    let status = bin()
        .args(["sweep", "--param", "gamma", "--values", "1,2"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn compare_reports_all_four_encoders_with_clamp_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::default_synth();
    let report = compare_encoders(&cfg, tmp.path(), None).unwrap();
    let methods = [Method::Bovw, Method::Gnmf, Method::Stanncr, Method::Pinv];
    assert_eq!(report.rows.len(), 4);
    for m in methods {
        assert_eq!(report.rows.iter().filter(|r| r.method == m).count(), 1);
    }
    let pinv = report.rows.iter().find(|r| r.method == Method::Pinv).unwrap();
    assert!(pinv.clamped.is_some());
    assert!(report
        .rows
        .iter()
        .filter(|r| r.method != Method::Pinv)
        .all(|r| r.clamped.is_none()));
    let csv = fs::read_to_string(tmp.path().join("compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}
