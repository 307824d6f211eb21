//! End-to-end checks of the command-line surface: subcommands, config
//! loading, output files, and exit codes.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_slowfast"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("slowfast-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn small_config_json() -> String {
    let mut cfg = slowfast_core::config::ExperimentConfig::linear_validation();
    cfg.model.k_modes = 3;
    cfg.dynamics.horizon = 0.05;
    cfg.sweep.eps = vec![0.5, 0.2];
    cfg.sweep.trials = 3;
    cfg.averaging.horizon = 5.0;
    cfg.averaging.n_paths = 4;
    cfg.measures.ensemble = 32;
    cfg.to_json_pretty().unwrap()
}

#[test]
fn simulate_writes_trajectory_files() {
    let dir = temp_dir("sim");
    let cfg_path = dir.join("config.json");
    std::fs::write(&cfg_path, small_config_json()).unwrap();
    let out = bin()
        .args(["simulate", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("time,u_1,u_2,u_3,v_1,v_2,v_3"));
    assert!(dir.join("trajectory.jsonl").exists());
    assert!(dir.join("manifest.json").exists());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn sweep_writes_run_record_and_is_reloadable() {
    let dir = temp_dir("sweep");
    let cfg_path = dir.join("config.json");
    std::fs::write(&cfg_path, small_config_json()).unwrap();
    let out = bin()
        .args(["sweep", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&dir)
        .args(["--workers", "2"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let record = slowfast_core::records::read_run_record(&dir).unwrap();
    assert_eq!(record.cells.len(), 6);
    assert_eq!(record.summaries.len(), 2);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn eps_flag_overrides_grid() {
    let dir = temp_dir("eps");
    let cfg_path = dir.join("config.json");
    std::fs::write(&cfg_path, small_config_json()).unwrap();
    let out = bin()
        .args(["sweep", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&dir)
        .args(["--eps", "0.4,0.1"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let record = slowfast_core::records::read_run_record(&dir).unwrap();
    let eps: Vec<f64> = record.summaries.iter().map(|s| s.epsilon).collect();
    assert_eq!(eps, vec![0.4, 0.1]);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn bbar_and_average_and_measure_run() {
    let dir = temp_dir("ops");
    let cfg_path = dir.join("config.json");
    std::fs::write(&cfg_path, small_config_json()).unwrap();
    for sub in ["bbar", "average"] {
        let out = bin()
            .args([sub, "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(&dir)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{sub}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert!(dir.join("bbar.json").exists());
    assert!(dir.join("averaged.csv").exists());
    let out = bin()
        .args(["measure", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&dir)
        .args(["--times", "0.0,0.5"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("measure_0.csv").exists());
    assert!(dir.join("measure_1.csv").exists());
    assert!(dir.join("measure_diagnostics.json").exists());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn invalid_config_exits_with_two() {
    let dir = temp_dir("bad");
    let mut cfg = slowfast_core::config::ExperimentConfig::linear_validation();
    cfg.model.fast_noise.rho = 6.0;
    cfg.model.fast_noise.beta = 2.0;
    let cfg_path = dir.join("bad.json");
    std::fs::write(&cfg_path, cfg.to_json_pretty().unwrap()).unwrap();
    for sub in ["simulate", "sweep", "check"] {
        let out = bin()
            .args([sub, "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(&dir)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(2), "subcommand {sub}");
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn malformed_json_is_a_config_failure() {
    let dir = temp_dir("malformed");
    let cfg_path = dir.join("broken.json");
    std::fs::write(&cfg_path, "{ not json").unwrap();
    let out = bin()
        .args(["check", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    // Serde errors surface as IO/serialization problems: exit 4.
    assert_eq!(out.status.code(), Some(4));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn check_passes_on_default_config() {
    let out = bin().arg("check").output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("all checks passed"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn identical_configs_identical_hash_prefix_dirs() {
    // The default out dir is derived from the config hash: same config,
    // same directory; a one-field change flips it.
    let a = slowfast_core::config::ExperimentConfig::linear_validation();
    let mut b = a.clone();
    b.seed = 99;
    assert_eq!(a.hash().unwrap(), a.clone().hash().unwrap());
    assert_ne!(a.hash().unwrap(), b.hash().unwrap());
}
