#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use pfstab::control::{restrict_operator, OperatorBank, StabilizationProblem};
use pfstab::dictionary::{lambda_matrix, LambdaMethod, RbfDictionary};
use pfstab::operator::PfMatrix;
use pfstab::systems::{integrate_flow, ControlGrid, StateBox, SystemSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random controlled chain on `n_free + 1` states with state 0 absorbing.
/// Rows of each `T_a` are drawn on the simplex with at least `leak` mass
/// sent to state 0; the column-stochastic operator is `P_a = T_aᵀ`.
pub fn random_instance(seed: u64, n_free: usize, n_actions: usize, leak: f64, gamma: f64) -> (OperatorBank<f64>, StabilizationProblem<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = n_free + 1;
    let p_list = (0..n_actions)
        .map(|_| {
            let mut t = DMatrix::<f64>::zeros(k, k);
            t[(0, 0)] = 1.0;
            for i in 1..k {
                let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
                let total: f64 = w[1..].iter().sum();
                let absorb = leak + (1.0 - leak) * rng.random::<f64>() * 0.5;
                t[(i, 0)] = absorb;
                for j in 1..k {
                    t[(i, j)] = (1.0 - absorb) * w[j] / total;
                }
            }
            PfMatrix::new(t.transpose())
        })
        .collect();
    let grid = ControlGrid::scalar_range(0.0, 1.0, (n_actions - 1) as f64).unwrap();
    let bank = OperatorBank::new(grid, p_list, "synthetic").unwrap();
    let cost = DMatrix::from_fn(k, n_actions, |i, _| if i == 0 { 0.0 } else { 0.1 + rng.random::<f64>() });
    let prob = StabilizationProblem::new(vec![0], gamma, cost).unwrap();
    (bank, prob)
}

/// Discounted cost `cᵀ (I − γ P¹_cl)⁻¹ m` of a deterministic policy given
/// per free state.
pub fn policy_cost(bank: &OperatorBank<f64>, prob: &StabilizationProblem<f64>, policy: &[usize]) -> f64 {
    let free = prob.free_indices();
    let n1 = free.len();
    let restricted: Vec<DMatrix<f64>> = bank
        .p_list
        .iter()
        .map(|p| restrict_operator(p, &prob.attractor_indices).unwrap())
        .collect();
    let p_cl = DMatrix::from_fn(n1, n1, |i, j| restricted[policy[j]][(i, j)]);
    let mu = (DMatrix::identity(n1, n1) - p_cl * prob.gamma)
        .lu()
        .solve(&prob.m_vec)
        .expect("stabilizing policy");
    let c = DVector::from_fn(n1, |j, _| prob.cost[(free[j], policy[j])]);
    c.dot(&mu)
}

/// Minimum over all `M^{n₁}` deterministic policies.
pub fn brute_force_minimum(bank: &OperatorBank<f64>, prob: &StabilizationProblem<f64>) -> (f64, Vec<usize>) {
    let n1 = prob.free_indices().len();
    let m = bank.n_actions();
    let mut best = (f64::INFINITY, vec![]);
    let mut policy = vec![0usize; n1];
    loop {
        let c = policy_cost(bank, prob, &policy);
        if c < best.0 {
            best = (c, policy.clone());
        }
        let mut i = 0;
        loop {
            if i == n1 {
                return best;
            }
            policy[i] += 1;
            if policy[i] < m {
                break;
            }
            policy[i] = 0;
            i += 1;
        }
    }
}

/// Largest relative gap between closed-form and Monte-Carlo overlap entries
/// for five centers packed within `σ`, sampled over the hull padded by `6σ`.
pub fn lambda_monte_carlo_error(dim: usize, sigma: f64, samples: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let centers: Vec<DVector<f64>> = (0..5).map(|_| DVector::from_fn(dim, |_, _| rng.random::<f64>() * sigma)).collect();
    let dict = RbfDictionary::new(centers.clone(), sigma).unwrap();
    let lo: Vec<f64> = (0..dim)
        .map(|d| centers.iter().map(|c| c[d]).fold(f64::INFINITY, f64::min) - 6.0 * sigma)
        .collect();
    let hi: Vec<f64> = (0..dim)
        .map(|d| centers.iter().map(|c| c[d]).fold(f64::NEG_INFINITY, f64::max) + 6.0 * sigma)
        .collect();
    let domain = StateBox::new(lo, hi);
    let exact = lambda_matrix(&dict, LambdaMethod::ClosedForm, 0, 0, None).unwrap().unregularized();
    let mc = lambda_matrix(&dict, LambdaMethod::MonteCarlo, samples, 5, Some(&domain))
        .unwrap()
        .unregularized();
    exact.iter().zip(mc.iter()).map(|(a, b)| (a - b).abs() / a).fold(0.0, f64::max)
}

/// Largest relative gap between analytic and central-difference RBF gradients.
pub fn gradient_fd_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let centers: Vec<DVector<f64>> = (0..6).map(|_| DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0))).collect();
    let dict = RbfDictionary::new(centers, 0.4).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        for j in 0..dict.len() {
            let g = dict.gradient(j, &x).unwrap();
            let h = 1e-6;
            let fd = DVector::from_fn(2, |d, _| {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[d] += h;
                xm[d] -= h;
                (dict.eval(&xp).unwrap()[j] - dict.eval(&xm).unwrap()[j]) / (2.0 * h)
            });
            worst = worst.max((&g - &fd).norm() / g.norm().max(1e-3));
        }
    }
    worst
}

/// Least-squares slope of `log(err)` against `log(h)` for RK4 on Duffing.
pub fn rk4_convergence_slope() -> f64 {
    let spec = SystemSpec::duffing(0.5);
    let x0 = DVector::from_vec(vec![1.3, -0.4]);
    let u = DVector::from_element(1, 0.7);
    let dt = 2.0;
    let reference = integrate_flow(&spec, &x0, &u, dt, 20_000).unwrap();
    let pts: Vec<(f64, f64)> = [4usize, 8, 16, 32, 64]
        .iter()
        .map(|&n| {
            let err = (integrate_flow(&spec, &x0, &u, dt, n).unwrap() - &reference).norm();
            ((dt / n as f64).ln(), err.ln())
        })
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}
