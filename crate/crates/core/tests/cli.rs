mod common;

use std::fs;
use std::path::Path;

use pemadm::cli::{self, cmd_simulate, ControllerSpec, RunConfig, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_MISSING_INPUT, EXIT_OK};
use serde_json::json;
use tempfile::TempDir;

const REFERENCE_SSC: &str = r#"{"name": "reference_ssc", "gains": [[[0, -101]], [[-0.45, -100]]]}"#;
const ZERO: &str = r#"{"name": "zero", "gains": [[[0, 0]], [[0, 0]]]}"#;

fn write_config(dir: &Path, value: serde_json::Value) -> String {
    let path = dir.join("config.json");
    fs::write(&path, value.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

fn run(dir: &Path, config: &str, args: &[&str]) -> i32 {
    let out = dir.join("out");
    let mut argv = vec!["pemadm"];
    argv.extend(args);
    argv.extend(["--config", config, "--out", out.to_str().unwrap()]);
    cli::run(argv)
}

fn controllers(specs: &[&str]) -> Vec<serde_json::Value> {
    specs.iter().map(|s| serde_json::from_str(s).unwrap_or_else(|_| json!(s))).collect()
}

#[test]
fn analyze_exit_codes() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), json!({ "controllers": controllers(&[REFERENCE_SSC]) }));
    assert_eq!(run(dir.path(), &cfg, &["analyze"]), EXIT_OK);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/analysis_reference_ssc.json")).unwrap()).unwrap();
    assert_eq!(report["stability"]["feasible"], true);
    assert!(report["spectral_radius"].as_f64().unwrap() < 1.0);

    let cfg = write_config(dir.path(), json!({ "controllers": controllers(&[ZERO]) }));
    assert_eq!(run(dir.path(), &cfg, &["analyze"]), EXIT_INFEASIBLE);
}

#[test]
fn analyze_needs_gains() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), json!({ "controllers": ["sogcc"] }));
    assert_eq!(run(dir.path(), &cfg, &["analyze"]), EXIT_MISSING_INPUT);
}

#[test]
fn malformed_configs_exit_64() {
    let dir = TempDir::new().unwrap();
    let (model, _, _) = common::car_following();
    let mut m = serde_json::to_value(&model).unwrap();
    m.as_object_mut().unwrap().remove("transition");
    let cfg = write_config(dir.path(), json!({ "model": m, "x0": [0, 0] }));
    assert_eq!(run(dir.path(), &cfg, &["analyze"]), EXIT_CONFIG);

    let cfg = write_config(dir.path(), json!({ "trials": 0 }));
    assert_eq!(run(dir.path(), &cfg, &["simulate"]), EXIT_CONFIG);
    assert_eq!(cli::run(["pemadm", "frobnicate"]), EXIT_CONFIG);
    let absent = dir.path().join("absent.json");
    assert_eq!(run(dir.path(), absent.to_str().unwrap(), &["analyze"]), EXIT_MISSING_INPUT);
}

#[test]
fn unstabilizable_model_synthesis_exits_2() {
    let dir = TempDir::new().unwrap();
    let model = json!({
        "A": [[1.2]], "B": [[0.0]],
        "modes": [{ "C": [[1.0]], "D": [[0.1]], "E": [[0.0]] }],
        "transition": [[1.0]], "bias_bound": 0.0
    });
    let cfg = write_config(dir.path(), json!({ "model": model, "x0": [1.0], "r0": 0 }));
    assert_eq!(run(dir.path(), &cfg, &["synthesize", "ssc"]), EXIT_INFEASIBLE);
    let report = fs::read_to_string(dir.path().join("out/synthesis_ssc.json")).unwrap();
    assert!(report.contains("\"status\": \"infeasible\""));
    assert!(!dir.path().join("out/gains_ssc.json").exists());
}

#[test]
fn synthesis_caches_gains_for_the_model() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), json!({ "controllers": ["ssc"], "trials": 2, "horizon": 50 }));
    assert_eq!(run(dir.path(), &cfg, &["synthesize", "ssc"]), EXIT_OK);
    assert!(dir.path().join("out/gains_ssc.json").exists());
    assert_eq!(run(dir.path(), &cfg, &["analyze"]), EXIT_OK);

    // Same output directory, different plant: the cache must not be reused.
    let scenario = json!({
        "h": 0.02, "delta_d": -5.0,
        "d00": 0.01, "d01": 0.05, "d10": 0.01, "d11": 0.05,
        "e00": 0.01, "e01": 0.01, "e10": 0.01, "e11": 0.01,
        "p00": 0.7, "p01": 0.3, "p10": 0.2, "p11": 0.8,
        "ego_init": [0, 1], "leader_init": [10, 5],
        "bias": { "kind": "constant", "value": [-1, -1] }
    });
    let cfg = write_config(dir.path(), json!({ "scenario": scenario, "controllers": ["ssc"] }));
    assert_eq!(run(dir.path(), &cfg, &["analyze"]), EXIT_CONFIG);
}

#[test]
fn simulate_writes_the_documented_files() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        json!({ "controllers": controllers(&[REFERENCE_SSC]), "trials": 1, "horizon": 20, "master_seed": 3 }),
    );
    assert_eq!(run(dir.path(), &cfg, &["simulate"]), EXIT_OK);
    let out = dir.path().join("out");
    let summary = fs::read_to_string(out.join("summary_reference_ssc.csv")).unwrap();
    assert!(!summary.contains('\r'));
    let mut lines = summary.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,time_s,rmse,x1_mean,x1_std,x2_mean,x2_std,u_mean,u_std,gap_mean,gap_std"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 21);
    for row in &rows {
        for idx in [4, 6, 8, 10] {
            assert_eq!(row[idx], "0", "single trial must have zero std: {row:?}");
        }
    }
    assert_eq!(rows[0][9], "10");
    let costs = fs::read_to_string(out.join("costs_reference_ssc.csv")).unwrap();
    assert!(costs.starts_with("trial,cost,collided\n0,"));
    assert!(costs.trim_end().ends_with(",false"));

    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["master_seed"], 3);
    let echoed: RunConfig = serde_json::from_value(meta["config"].clone()).unwrap();
    assert_eq!(echoed.trials, 1);
    assert!(matches!(&echoed.controllers[0], ControllerSpec::Explicit { name, .. } if name == "reference_ssc"));
    assert!(meta["versions"]["lmi_backend"].as_str().unwrap().contains("ipm"));
}

#[test]
fn compare_merges_or_reports_missing_inputs() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        json!({ "controllers": controllers(&[REFERENCE_SSC, "idm"]), "trials": 4, "horizon": 30 }),
    );
    assert_eq!(run(dir.path(), &cfg, &["compare"]), EXIT_MISSING_INPUT);
    assert_eq!(run(dir.path(), &cfg, &["compare", "--run"]), EXIT_OK);
    let merged = fs::read_to_string(dir.path().join("out/comparison.csv")).unwrap();
    let header = merged.lines().next().unwrap();
    assert!(header.starts_with("controller,step,") && header.ends_with(",collision_fraction,mean_cost"));
    let idm: Vec<&str> = merged.lines().filter(|l| l.starts_with("idm,")).collect();
    assert_eq!(idm.len(), 31);
    assert!(idm.iter().all(|l| l.split(',').nth(12) == Some("0")));

    // A single controller passes its summary through.
    assert_eq!(run(dir.path(), &cfg, &["compare", "--controller", "reference_ssc"]), EXIT_OK);
    let merged = fs::read_to_string(dir.path().join("out/comparison.csv")).unwrap();
    let summary = fs::read_to_string(dir.path().join("out/summary_reference_ssc.csv")).unwrap();
    assert_eq!(merged.lines().count(), summary.lines().count());
    for (m, s) in merged.lines().skip(1).zip(summary.lines().skip(1)) {
        assert!(m.starts_with(&format!("reference_ssc,{s},")));
    }
}

#[test]
fn simulate_is_byte_identical_across_thread_counts() {
    let base = TempDir::new().unwrap();
    let mut cfg: RunConfig = serde_json::from_value(json!({
        "controllers": controllers(&[REFERENCE_SSC, "idm"]),
        "trials": 16, "horizon": 200, "master_seed": 99
    }))
    .unwrap();
    let mut files = Vec::new();
    for (i, threads) in [Some(1), Some(3), None].into_iter().enumerate() {
        cfg.out_dir = base.path().join(format!("run{i}"));
        assert_eq!(cmd_simulate(&cfg, threads).unwrap(), EXIT_OK);
        let mut names: Vec<String> =
            fs::read_dir(&cfg.out_dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
        names.sort();
        let csvs: Vec<(String, Vec<u8>)> = names
            .into_iter()
            .filter(|n| n.ends_with(".csv"))
            .map(|n| {
                let bytes = fs::read(cfg.out_dir.join(&n)).unwrap();
                (n, bytes)
            })
            .collect();
        files.push(csvs);
    }
    assert_eq!(files[0].len(), 4);
    assert_eq!(files[0], files[1]);
    assert_eq!(files[0], files[2]);
}
