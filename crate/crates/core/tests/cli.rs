mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::{config, unit_vector};
use mismatch_lasso::experiment::{ExperimentConfig, ExperimentKind, SetSpec};
use mismatch_lasso::model_gen::{LatentKind, ObservationModel, OutputFn};
use serde_json::Value;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mismatch-lasso")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, cfg: &ExperimentConfig) -> String {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn sign_sim(out: &Path) -> ExperimentConfig {
    let mut cfg = config(
        ExperimentKind::ErrorDecay,
        ObservationModel::Sim { index: unit_vector(&[1.0, -1.0, 0.5], 8), g: OutputFn::Sign },
        LatentKind::Gaussian,
        8,
        vec![64, 128],
        3,
    );
    cfg.hypothesis_set = SetSpec::L2Ball { radius: None, factor: 2.0 };
    cfg.output_dir = out.to_path_buf();
    cfg
}

#[test]
fn run_writes_csv_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let path = write_config(tmp.path(), "cfg.json", &sign_sim(&out));
    let res = cli(&["run", &path]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("experiment,n,trial,error,rho_hat,dev_hat,objective,converged"));
    assert_eq!(lines.count(), 6);

    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["experiment"], "error_decay");
    assert_eq!(summary["medians"].as_array().unwrap().len(), 2);
}

#[test]
fn identical_seeds_give_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let path = write_config(tmp.path(), &format!("{run}.json"), &sign_sim(&out));
        assert!(cli(&["run", &path]).status.success());
        outputs.push(fs::read(out.join("results.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn width_and_mismatch_subcommands() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let mut cfg = sign_sim(&out);
    cfg.dist = mismatch_lasso::model_gen::LatentDistribution::new(LatentKind::Rademacher, 8).unwrap();
    let path = write_config(tmp.path(), "cfg.json", &cfg);

    let res = cli(&["width", &path]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let width: Value = serde_json::from_str(&fs::read_to_string(out.join("width.json")).unwrap()).unwrap();
    assert!(width.is_object());

    let res = cli(&["mismatch", &path]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("mismatch.json")).unwrap()).unwrap();
    assert!(report["rho_hat"].as_f64().unwrap() >= 0.0);
    assert_eq!(report["model_digest"].as_str().unwrap().len(), 64);
}

#[test]
fn invalid_config_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = sign_sim(&tmp.path().join("out"));
    cfg.trials = 0;
    let path = write_config(tmp.path(), "cfg.json", &cfg);
    assert_eq!(cli(&["run", &path]).status.code(), Some(2));

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"experiment": "error_decay", "unknown_field": 1}"#).unwrap();
    assert_eq!(cli(&["run", bad.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn unreadable_paths_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.json");
    assert_eq!(cli(&["run", missing.to_str().unwrap()]).status.code(), Some(3));

    let blocker = tmp.path().join("file");
    fs::write(&blocker, "").unwrap();
    let cfg = sign_sim(&blocker.join("out"));
    let path = write_config(tmp.path(), "cfg.json", &cfg);
    assert_eq!(cli(&["run", &path]).status.code(), Some(3));
}
