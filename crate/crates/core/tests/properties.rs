mod common;

use nalgebra::{DMatrix, DVector};
use pfstab::config::preset;
use pfstab::control::{
    balance_residual, closed_loop_pf, evaluate_cost, extract_policy, lyapunov_certificate, solve_stabilization,
    FeedbackMode, StabilizationProblem,
};
use pfstab::dictionary::{lambda_matrix, LambdaMethod, RbfDictionary};
use pfstab::io;
use pfstab::linalg::spectral_radius;
use pfstab::operator::{pf_from_koopman, project_columns, validate_markov, KoopmanMatrix, PfMatrix};
use pfstab::optim::SolverOptions;
use pfstab::systems::{step_map, ControlGrid, SystemSpec, TrajectoryDataset};
use proptest::prelude::*;

fn matrix(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(lo..hi, n * n).prop_map(move |v| DMatrix::from_vec(n, n, v))
}

fn centers_1d(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::btree_set(-2000i32..2000, k).prop_map(|s| s.into_iter().map(|i| f64::from(i) / 1000.0).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_gives_markov_matrices(m in matrix(6, -1.0, 1.0)) {
        let p = project_columns(&PfMatrix::new(m));
        let r = validate_markov(&p, 1e-12);
        prop_assert!(r.pass, "{:?}", r);
    }

    #[test]
    fn projection_fixes_markov_matrices(m in matrix(5, 0.01, 1.0)) {
        let p = project_columns(&PfMatrix::new(m));
        let again = project_columns(&p);
        prop_assert!((&again.p_mat - &p.p_mat).amax() < 1e-15);
    }

    #[test]
    fn koopman_pf_duality_round_trips(k_mat in matrix(5, -1.0, 1.0), c in centers_1d(5), sigma in 0.2f64..1.0) {
        let dict = RbfDictionary::new(c.iter().map(|&x| DVector::from_element(1, x)).collect(), sigma).unwrap();
        let lam = lambda_matrix(&dict, LambdaMethod::ClosedForm, 0, 0, None).unwrap();
        let k = KoopmanMatrix { k_mat: k_mat.clone(), fit_residual: 0.0, constraint_violation: 0.0, rank_deficient: false };
        let p = pf_from_koopman(&k, &lam).unwrap();
        let back = (&lam.lambda * &p.p_mat * lam.lambda.clone().try_inverse().unwrap()).transpose();
        let cond = lam.lambda.norm() * lam.lambda.clone().try_inverse().unwrap().norm();
        prop_assume!(cond < 1e4);
        prop_assert!((&back - &k_mat).amax() < 1e-10 * cond.max(1.0), "{}", (&back - &k_mat).amax());
    }

    #[test]
    fn normalized_weights_form_a_partition_of_unity(c in centers_1d(8), sigma in 0.001f64..1.0, x in -50.0f64..50.0) {
        let dict = RbfDictionary::new(c.iter().map(|&v| DVector::from_element(1, v)).collect(), sigma).unwrap();
        let w = dict.normalized_weights(&DVector::from_element(1, x)).unwrap();
        prop_assert!(w.iter().all(|&v| v >= 0.0 && v.is_finite()));
        prop_assert!((w.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn standard_map_wraps_the_angle(x in 0.0f64..1.0, y in 0.0f64..1.0, u in -0.5f64..0.5) {
        let spec = SystemSpec::standard_map(0.25);
        let out = step_map(&spec, &DVector::from_vec(vec![x, y]), &DVector::from_element(1, u)).unwrap();
        prop_assert!((0.0..1.0).contains(&out[0]));
        let dy = 0.25 * u * (2.0 * std::f64::consts::PI * x).sin();
        prop_assert!((out[1] - (y + dy)).abs() < 1e-15);
    }

    #[test]
    fn scalar_grids_are_increasing(lo in -5.0f64..0.0, steps in 1usize..40, step in 0.01f64..0.5) {
        let hi = lo + step * steps as f64;
        let g = ControlGrid::scalar_range(lo, step, hi).unwrap();
        prop_assert_eq!(g.len(), steps + 1);
        prop_assert!(g.values.windows(2).all(|w| w[0][0] < w[1][0]));
        prop_assert!(g.validate().is_ok());
    }

    #[test]
    fn spectral_radius_matches_eigenvalues(m in matrix(6, 0.0, 1.0)) {
        let est = spectral_radius(&m, 1e-12, 100_000);
        let exact = m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
        prop_assert!(est.upper_bound >= exact - 1e-9);
        prop_assert!((est.rho - exact).abs() < 1e-6 * exact.max(1.0), "{} vs {}", est.rho, exact);
    }

    #[test]
    fn matrix_csv_is_bit_exact(m in matrix(4, -1e6, 1e6), tiny in -1e-300f64..1e-300) {
        let mut m = m;
        m[(0, 0)] = tiny;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        io::write_matrix(&m, &path).unwrap();
        let back = io::read_matrix(&path).unwrap();
        prop_assert!(m.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn dataset_csv_round_trips(pts in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0), 1..40), a in 0usize..30) {
        let ds = TrajectoryDataset {
            action_index: a,
            pairs: pts.iter().map(|&(x0, x1, y0, y1)| (DVector::from_vec(vec![x0, x1]), DVector::from_vec(vec![y0, y1]))).collect(),
            source_seed: 0,
            dropped: 0,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(io::dataset_file_name(a));
        io::write_dataset(&ds, &path).unwrap();
        prop_assert_eq!(io::read_dataset(&path, Some(a)).unwrap(), ds);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lp_optimum_matches_best_deterministic_policy(seed in 0u64..10_000, n_free in 1usize..4, n_actions in 2usize..4, gamma in 1.0f64..1.2) {
        let (bank, prob) = common::random_instance(seed, n_free, n_actions, 0.2, gamma);
        let sol = solve_stabilization(&bank, &prob, SolverOptions::default()).unwrap();
        let (oracle, _) = common::brute_force_minimum(&bank, &prob);
        prop_assert!((sol.objective - oracle).abs() <= 1e-7 * oracle.max(1.0));
        prop_assert!((evaluate_cost(&sol, &prob) - sol.objective).abs() <= 1e-9 * oracle.max(1.0));
        prop_assert!(balance_residual(&bank, &prob, &sol).unwrap() < 1e-9);
    }

    #[test]
    fn extracted_policy_is_certified(seed in 0u64..10_000, n_free in 1usize..5, n_actions in 2usize..4, gamma in 1.0f64..1.2) {
        let (bank, prob) = common::random_instance(seed, n_free, n_actions, 0.2, gamma);
        let sol = solve_stabilization(&bank, &prob, SolverOptions::default()).unwrap();
        let policy = extract_policy(&sol, &bank, &prob, FeedbackMode::NearestCenter, false);
        let cert = lyapunov_certificate(&closed_loop_pf(&bank, &policy).unwrap(), &prob).unwrap();
        prop_assert!(cert.pass);
        prop_assert!(cert.spectral_radius < 1.0);
        prop_assert!(cert.mu_bar.iter().all(|&v| v >= -1e-8));
        let free = prob.free_indices();
        let deterministic: Vec<usize> = free.iter().map(|&j| policy.action_of[j]).collect();
        let cost = common::policy_cost(&bank, &prob, &deterministic);
        prop_assert!((cost - sol.objective).abs() <= 1e-7 * cost.max(1.0), "policy {} vs LP {}", cost, sol.objective);
    }

    #[test]
    fn policy_is_invariant_to_cost_scaling(seed in 0u64..10_000, n_free in 1usize..4, scale in 0.01f64..100.0) {
        let (bank, prob) = common::random_instance(seed, n_free, 3, 0.2, 1.05);
        let sol = solve_stabilization(&bank, &prob, SolverOptions::default()).unwrap();
        let base = extract_policy(&sol, &bank, &prob, FeedbackMode::NearestCenter, false);
        let scaled = StabilizationProblem { cost: &prob.cost * scale, ..prob.clone() };
        let sol2 = solve_stabilization(&bank, &scaled, SolverOptions::default()).unwrap();
        let costs: Vec<f64> = {
            let free = prob.free_indices();
            let n = free.len();
            let mut out = vec![];
            let mut pol = vec![0usize; n];
            for code in 0..3usize.pow(n as u32) {
                let mut c = code;
                for p in pol.iter_mut() { *p = c % 3; c /= 3; }
                out.push(common::policy_cost(&bank, &prob, &pol));
            }
            out
        };
        let best = costs.iter().copied().fold(f64::INFINITY, f64::min);
        let unique = costs.iter().filter(|&&c| (c - best).abs() <= 1e-6 * best).count() == 1;
        prop_assume!(unique);
        let other = extract_policy(&sol2, &bank, &scaled, FeedbackMode::NearestCenter, false);
        prop_assert_eq!(base.action_of, other.action_of);
    }
}

#[test]
fn config_hash_ignores_output_dir_only() {
    let base = preset("duffing").unwrap();
    let mut moved = base.clone();
    moved.output_dir = Some("/somewhere/else".into());
    assert_eq!(base.hash(), moved.hash());
    let mut tweaked = base.clone();
    tweaked.dictionary.sigma = 0.21;
    assert_ne!(base.hash(), tweaked.hash());
    let mut tweaked = base.clone();
    tweaked.data.seed += 1;
    assert_ne!(base.hash(), tweaked.hash());
    let mut tweaked = base;
    tweaked.stabilization.gamma = 1.04;
    assert_ne!(preset("duffing").unwrap().hash(), tweaked.hash());
}
