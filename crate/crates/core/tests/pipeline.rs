use std::fs;
use std::path::Path;

use nalgebra::DVector;
use pfstab::control::FeedbackMode;
use pfstab::config::{preset, GridConfig, PipelineConfig};
use pfstab::io;
use pfstab::pipeline::{run_pipeline, simulate, verify, Bundle, Controller, ConvergenceSpec, RolloutMode};
use pfstab::systems::SystemSpec;
use pfstab::{exit_code, Error};

fn small_logistic(dir: &Path) -> PipelineConfig {
    let mut cfg = preset("cubic_logistic").unwrap();
    cfg.name = "small".into();
    cfg.grid = GridConfig::Range { lo: -0.2, step: 0.1, hi: 0.2 };
    cfg.dictionary.k_centers = 20;
    cfg.dictionary.sigma = 0.08;
    cfg.data.n_traj = 150;
    cfg.data.traj_len = 5;
    cfg.nsdmd.max_iter = 300;
    cfg.simulation.n_random = 5;
    cfg.output_dir = Some(dir.to_path_buf());
    cfg
}

#[test]
fn bundle_is_complete_and_verifiable() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("b");
    let cfg = small_logistic(&dir);
    let out = run_pipeline(&cfg).unwrap();
    let b = Bundle::new(&dir);
    for a in 0..5 {
        assert!(b.operator(a).exists());
        assert!(b.operator_meta(a).exists());
        assert!(b.dataset(a).exists());
    }
    assert!(!b.operator(5).exists());
    for p in [
        b.config(),
        b.manifest(),
        b.dictionary(),
        b.dictionary_meta(),
        b.lambda(),
        b.theta(),
        b.solution(),
        b.policy(),
        b.policy_meta(),
        b.certificate(),
        b.mu_bar(),
        b.rollouts(RolloutMode::OpenLoop),
        b.rollouts(RolloutMode::ClosedLoop),
    ] {
        assert!(p.exists(), "{} missing", p.display());
    }
    assert!(!b.failure().exists());
    assert!(out.report.operators_pass);
    assert!(out.report.balance_residual < 1e-8);

    let report = verify(&b).unwrap();
    assert_eq!(report.certificate.spectral_radius, out.report.certificate.spectral_radius);

    let (policy, centers) = io::read_policy(&b.policy(), &b.policy_meta()).unwrap();
    assert_eq!(policy, out.synthesis.policy);
    assert_eq!(centers, out.dict.centers().to_vec());

    let (header, rows) = io::read_table(&b.rollouts(RolloutMode::ClosedLoop)).unwrap();
    assert_eq!(header, ["rollout", "step", "x0", "u0", "cost"]);
    let expected_rows: usize = out.closed_loop.iter().map(|r| r.states.len()).sum();
    assert_eq!(rows.len(), expected_rows);
    for rec in out.closed_loop.iter().chain(&out.open_loop) {
        assert_eq!(rec.controls.len() + 1, rec.states.len());
    }

    let reloaded = PipelineConfig::load(&b.config()).unwrap();
    assert_eq!(reloaded.hash(), cfg.hash());
}

#[test]
fn rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (d1, d2) = (tmp.path().join("one"), tmp.path().join("two"));
    run_pipeline(&small_logistic(&d1)).unwrap();
    run_pipeline(&small_logistic(&d2)).unwrap();
    let (b1, b2) = (Bundle::new(&d1), Bundle::new(&d2));
    for (p1, p2) in [
        (b1.theta(), b2.theta()),
        (b1.policy(), b2.policy()),
        (b1.certificate(), b2.certificate()),
        (b1.operator(2), b2.operator(2)),
        (b1.dictionary(), b2.dictionary()),
    ] {
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap(), "{}", p1.display());
    }
}

#[test]
fn corrupted_operator_column_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("b");
    run_pipeline(&small_logistic(&dir)).unwrap();
    let b = Bundle::new(&dir);
    let mut p = io::read_matrix(&b.operator(3)).unwrap();
    p[(0, 7)] += 0.25;
    io::write_matrix(&p, &b.operator(3)).unwrap();
    let err = verify(&b).unwrap_err();
    assert_eq!(exit_code(&err), 4);
    assert!(err.to_string().contains("[3]"), "{err}");
}

#[test]
fn missing_artifacts_are_listed() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("b");
    run_pipeline(&small_logistic(&dir)).unwrap();
    let b = Bundle::new(&dir);
    fs::remove_file(b.operator(1)).unwrap();
    fs::remove_file(b.theta()).unwrap();
    match verify(&b) {
        Err(Error::MissingArtifacts(paths)) => {
            assert_eq!(paths.len(), 2);
            assert!(paths.contains(&b.operator(1)));
            assert!(paths.contains(&b.theta()));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn bad_sigma_is_rejected_before_any_work() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("b");
    let mut cfg = small_logistic(&dir);
    cfg.dictionary.sigma = 0.0;
    let err = run_pipeline(&cfg).err().unwrap();
    assert_eq!(exit_code(&err), 2);
    assert!(!dir.exists());
}

#[test]
fn infeasible_synthesis_leaves_a_failure_record() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("b");
    let mut cfg = small_logistic(&dir);
    cfg.grid = GridConfig::Range { lo: 0.0, step: 0.1, hi: 0.0 };
    cfg.stabilization.gamma = 2.5;
    cfg.stabilization.gamma_fallback.clear();
    let err = run_pipeline(&cfg).err().unwrap();
    assert_eq!(exit_code(&err), 3);
    let b = Bundle::new(&dir);
    let failure: serde_json::Value = io::read_json(&b.failure()).unwrap();
    assert_eq!(failure["stage"], "synthesize");
    assert!(b.operator(0).exists());
}

#[test]
fn rollout_edge_cases() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("b");
    let out = run_pipeline(&small_logistic(&dir)).unwrap();
    let controller = Controller {
        policy: &out.synthesis.policy,
        dict: &out.dict,
    };
    let conv = ConvergenceSpec {
        targets: vec![DVector::zeros(1)],
        radius: 0.05,
        dwell: 5,
    };
    let spec = SystemSpec::cubic_logistic(2.3);
    let x0 = [DVector::from_element(1, 0.4)];
    let recs = simulate(&spec, Some(&controller), &x0, 0, &conv).unwrap();
    assert_eq!(recs[0].states, vec![x0[0].clone()]);
    assert!(recs[0].controls.is_empty());

    // the nearest center of the origin is an attractor element, so u = 0
    // there and the fixed point is kept
    let mut nearest = out.synthesis.policy.clone();
    nearest.feedback_mode = FeedbackMode::NearestCenter;
    let still = Controller {
        policy: &nearest,
        dict: &out.dict,
    };
    let inside = [DVector::zeros(1)];
    let recs = simulate(&spec, Some(&still), &inside, 10, &conv).unwrap();
    assert_eq!(recs[0].steps_to_converge, Some(0));
    assert!(recs[0].converged);

    let bad = [DVector::from_element(1, 40.0)];
    let recs = simulate(&spec, None, &bad, 50, &conv).unwrap();
    assert!(recs[0].diverged && !recs[0].converged);
}

#[test]
fn open_loop_duffing_settles_in_a_well() {
    let spec = SystemSpec::duffing(0.5);
    let conv = ConvergenceSpec {
        targets: vec![DVector::from_vec(vec![1.0, 0.0])],
        radius: 0.05,
        dwell: 5,
    };
    let recs = simulate(&spec, None, &[DVector::from_vec(vec![1.5, 0.0])], 200, &conv).unwrap();
    assert!(recs[0].converged);
    assert!(recs[0].controls.iter().all(|u| u[0] == 0.0));
}
