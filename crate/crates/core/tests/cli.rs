//! The `memat` binary end to end on a tiny configuration.

mod common;

use std::path::Path;
use std::process::{Command, Output};

fn memat(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memat"))
        .args(args)
        .arg("--config")
        .arg(config)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn stages_run_in_order_and_report_every_metric() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("experiment.toml");
    common::tiny_config(&dir.path().join("run")).save(&config).unwrap();

    let early = memat(&config, &["edit"]);
    assert!(!early.status.success());
    let msg = String::from_utf8_lossy(&early.stderr);
    assert!(msg.contains("run `gen` first"), "{msg}");

    for stage in ["gen", "pretrain", "edit", "probe", "optimize"] {
        let out = memat(&config, &[stage]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for against in ["baseline", "memit", "memat"] {
        let out = memat(&config, &["eval", "--against", against, "--workers", "1"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let reports: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/reports/eval_memat.json")).unwrap()).unwrap();
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 2);
    for r in reports {
        let metrics = r["metrics"].as_object().unwrap();
        for name in memat::eval::METRIC_NAMES {
            assert!(metrics[name]["value"].is_f64(), "{name}");
        }
        assert!(r["metadata"]["seed"].is_u64());
    }
    assert!(dir.path().join("run/reports/crosslingual.csv").exists());

    // a changed upstream section makes downstream stages refuse stale inputs
    let stale = memat(&config, &["optimize", "--set", "edit.covariance_scale=0.5"]);
    assert!(!stale.status.success());
    assert!(String::from_utf8_lossy(&stale.stderr).contains("--force"));
    let forced = memat(&config, &["eval", "--against", "memit", "--set", "edit.covariance_scale=0.5", "--force"]);
    assert!(forced.status.success());
}

#[test]
fn config_command_prints_a_loadable_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.toml");
    common::tiny_config(dir.path()).save(&config).unwrap();
    let out = memat(&config, &["config", "--set", "memat.k=8"]);
    assert!(out.status.success());
    let c = memat::experiment::ExperimentConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(c.memat.k, 8);
}

#[test]
fn bad_override_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.toml");
    common::tiny_config(dir.path()).save(&config).unwrap();
    let out = memat(&config, &["gen", "--set", "corpus.n_pairs=banana"]);
    assert_eq!(out.status.code(), Some(2));
}
