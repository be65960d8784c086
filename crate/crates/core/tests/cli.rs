use std::path::Path;
use std::process::{Command, Output};

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_robust-sis"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, r#"{"n": 6, "t_max": 4, "sensor_step": 3, "sensors": {"top_k": 6}, "network": {"synthetic": {"density": 0.3, "rho_band": [0.9, 1.2]}}}"#).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn sweep_is_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    for (out, jobs) in [("a", "1"), ("b", "3")] {
        let o = cli(dir.path(), &["--config", &config, "--out-dir", out, "--jobs", jobs, "sweep-sensors"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = std::fs::read_to_string(dir.path().join("a/sweep_sensors.csv")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("b/sweep_sensors.csv")).unwrap();
    assert_eq!(a, b);
    assert!(a.starts_with("param,lambda_star,rho_eval_rob,rho_eval_opt,seconds\n"));
    // counts 0, 3, 6
    assert_eq!(a.lines().count(), 4);
}

#[test]
fn worst_case_of_the_robust_allocation_is_its_certified_rate() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let o = cli(dir.path(), &["--config", &config, "--out-dir", "o", "allocate", "--mode", "robust"]);
    assert!(o.status.success());
    let o = cli(
        dir.path(),
        &["--config", &config, "--out-dir", "o", "worst-case", "--dc", "o/allocation_robust.json"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let alloc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("o/allocation_robust.json")).unwrap()).unwrap();
    let wc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("o/worst_case.json")).unwrap()).unwrap();
    let lambda = alloc["lambda_star"].as_f64().unwrap();
    let rho_wor = wc["rho_wor"].as_f64().unwrap();
    assert!((lambda - rho_wor).abs() < 1e-5, "{lambda} vs {rho_wor}");
    assert_eq!(wc["certification"]["violations"], 0);
}

#[test]
fn seed_flag_changes_the_network() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    for (out, seed) in [("a", "7"), ("b", "8")] {
        assert!(cli(dir.path(), &["--config", &config, "--out-dir", out, "--seed", seed, "simulate"])
            .status
            .success());
    }
    let a = std::fs::read(dir.path().join("a/network.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/network.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"n": 4, "unknown": 1}"#).unwrap();
    assert_eq!(cli(dir.path(), &["--config", "bad.json", "simulate"]).status.code(), Some(1));
    assert_eq!(cli(dir.path(), &["--config", "missing.json", "simulate"]).status.code(), Some(1));
    assert_eq!(cli(dir.path(), &["no-such-command"]).status.code(), Some(1));
    std::fs::write(dir.path().join("range.json"), r#"{"n": 4, "p0": 2.0}"#).unwrap();
    assert_eq!(cli(dir.path(), &["--config", "range.json", "simulate"]).status.code(), Some(1));
    assert_eq!(cli(dir.path(), &["--help"]).status.code(), Some(0));
}
