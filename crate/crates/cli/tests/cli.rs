use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pfstab::config::{preset, GridConfig, PipelineConfig};

fn pfstab(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pfstab"))
        .args(args)
        .env("PFSTAB_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn small_config(path: &Path, tweak: impl FnOnce(&mut PipelineConfig)) {
    let mut cfg = preset("cubic_logistic").unwrap();
    cfg.name = "tiny".into();
    cfg.grid = GridConfig::Range { lo: -0.2, step: 0.1, hi: 0.2 };
    cfg.dictionary.k_centers = 20;
    cfg.dictionary.sigma = 0.08;
    cfg.data.n_traj = 150;
    cfg.data.traj_len = 5;
    cfg.nsdmd.max_iter = 300;
    cfg.simulation.n_random = 3;
    tweak(&mut cfg);
    fs::write(path, cfg.to_toml().unwrap()).unwrap();
}

#[test]
fn staged_commands_build_a_verified_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    small_config(&cfg, |_| {});
    let out = pfstab(&["generate", cfg.to_str().unwrap()], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let bundle = tmp.path().join("tiny");
    let b = bundle.to_str().unwrap();
    for stage in ["fit", "synthesize"] {
        let out = pfstab(&[stage, b], tmp.path());
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = pfstab(&["simulate", b, "--horizon", "30", "--x0", "0.3"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("closed loop"));
    let out = pfstab(&["verify", b], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("certificate pass     true"), "{text}");
}

#[test]
fn bad_config_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    small_config(&cfg, |c| c.dictionary.sigma = -1.0);
    let out = pfstab(&["run", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("tiny").exists());

    let out = pfstab(&["run", tmp.path().join("nope.toml").to_str().unwrap()], tmp.path());
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn verify_on_an_empty_directory_lists_missing_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pfstab(&["verify", tmp.path().to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config.toml"));
}

#[test]
fn infeasible_gamma_exits_with_code_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    small_config(&cfg, |c| {
        c.grid = GridConfig::Range { lo: 0.0, step: 0.1, hi: 0.0 };
        c.stabilization.gamma_fallback.clear();
    });
    let out = pfstab(&["run", cfg.to_str().unwrap(), "--gamma", "2.5"], tmp.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("tiny").join("failure.json").exists());
}

#[test]
fn print_config_round_trips_through_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pfstab(&["reproduce", "duffing", "--print-config", "--seed", "9"], tmp.path());
    assert!(out.status.success());
    let path = tmp.path().join("duffing.toml");
    fs::write(&path, out.stdout).unwrap();
    let mut expected = preset("duffing").unwrap();
    expected.data.seed = 9;
    assert_eq!(PipelineConfig::load(&path).unwrap().hash(), expected.hash());

    let out = pfstab(&["reproduce", "nonexistent"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}
