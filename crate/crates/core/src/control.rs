//! Stabilization LP over occupation measures, policy extraction, feedback
//! laws and Lyapunov-measure certificates.
//!
//! Transfer matrices are column-stochastic (`P[i, j]` is the mass moving
//! from basis element `j` to `i`), so occupation mass propagates as `P θ`.
//! The balance equation on the complement of the attractor reads
//!
//! ```text
//! Σ_a θ_a − γ Σ_a P¹_a θ_a = m
//! ```
//!
//! and the certificate solves `(I − γ P¹_cl) μ = m`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dictionary::RbfDictionary;
use crate::error::{Error, Result};
use crate::linalg::spectral_radius;
use crate::operator::{validate_markov, PfMatrix};
use crate::optim::{solve_lp, LpProblem, SolveState, SolveStatus, SolverOptions};
use crate::scalar::Real;
use crate::systems::ControlGrid;

/// Slack floor used when the normalization constraint replaces a fixed `m`.
pub const NORMALIZE_SLACK_FLOOR: f64 = 1e-6;

/// Rows of `θ` whose largest entry is below this are treated as unvisited.
pub const UNVISITED_THRESHOLD: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct OperatorBank<T> {
    pub actions: ControlGrid<T>,
    pub p_list: Vec<PfMatrix<T>>,
    pub dictionary_ref: String,
}

impl<T: Real> OperatorBank<T> {
    pub fn new(actions: ControlGrid<T>, p_list: Vec<PfMatrix<T>>, dictionary_ref: impl Into<String>) -> Result<Self> {
        let bank = OperatorBank {
            actions,
            p_list,
            dictionary_ref: dictionary_ref.into(),
        };
        bank.validate(None)?;
        Ok(bank)
    }

    pub fn n_basis(&self) -> usize {
        self.p_list.first().map_or(0, |p| p.dim())
    }

    pub fn n_actions(&self) -> usize {
        self.p_list.len()
    }

    /// Checks shapes, and stochasticity when `tol` is given.
    pub fn validate(&self, tol: Option<T>) -> Result<()> {
        self.actions.validate()?;
        if self.p_list.len() != self.actions.len() {
            return Err(Error::DimensionMismatch {
                expected: self.actions.len(),
                got: self.p_list.len(),
            });
        }
        let k = self.n_basis();
        for (a, p) in self.p_list.iter().enumerate() {
            if p.p_mat.nrows() != k || p.p_mat.ncols() != k {
                return Err(Error::DimensionMismatch {
                    expected: k,
                    got: p.p_mat.nrows(),
                });
            }
            if let Some(tol) = tol {
                let r = validate_markov(p, tol);
                if !r.pass {
                    return Err(Error::Verification(format!(
                        "operator for action {a} is not column-stochastic (min entry {:e}, column-sum deviation {:e})",
                        -r.max_negative_entry, r.max_column_sum_deviation
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Stage cost `G(x, u) = w_x · min_t ‖x − t‖² + w_u · ‖u‖²`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticCost<T> {
    pub targets: Vec<DVector<T>>,
    pub state_weight: T,
    pub control_weight: T,
}

impl<T: Real> QuadraticCost<T> {
    pub fn new(targets: Vec<DVector<T>>) -> Self {
        QuadraticCost {
            targets,
            state_weight: T::one(),
            control_weight: T::one(),
        }
    }

    pub fn eval(&self, x: &DVector<T>, u: &DVector<T>) -> T {
        let d = self
            .targets
            .iter()
            .map(|t| (x - t).norm_squared())
            .fold(None, |m: Option<T>, v| Some(m.map_or(v, |m| m.min(v))))
            .unwrap_or_else(|| x.norm_squared());
        self.state_weight * d + self.control_weight * u.norm_squared()
    }

    /// `K × M` matrix of `G(x_j*, u^a)`.
    pub fn matrix(&self, centers: &[DVector<T>], grid: &ControlGrid<T>) -> DMatrix<T> {
        DMatrix::from_fn(centers.len(), grid.len(), |j, a| self.eval(&centers[j], &grid.values[a]))
    }
}

/// Basis elements whose centers lie within `radius` of any target. A target
/// with no center inside the ball contributes its nearest center.
pub fn attractor_indices<T: Real>(centers: &[DVector<T>], targets: &[DVector<T>], radius: T) -> Vec<usize> {
    let mut out = Vec::new();
    for t in targets {
        let mut hit = false;
        let mut nearest = 0;
        let mut best = None;
        for (j, c) in centers.iter().enumerate() {
            let d = (c - t).norm();
            if d <= radius {
                out.push(j);
                hit = true;
            }
            if best.map_or(true, |b| d < b) {
                best = Some(d);
                nearest = j;
            }
        }
        if !hit && !centers.is_empty() {
            out.push(nearest);
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilizationProblem<T> {
    /// Sorted basis indices covering the attractor.
    pub attractor_indices: Vec<usize>,
    pub gamma: T,
    /// Reference measure on the non-attractor indices.
    pub m_vec: DVector<T>,
    /// `K × M` stage costs at the centers (attractor rows are ignored).
    pub cost: DMatrix<T>,
    pub normalize: bool,
}

impl<T: Real> StabilizationProblem<T> {
    /// Problem with `m = 1`.
    pub fn new(attractor_indices: Vec<usize>, gamma: T, cost: DMatrix<T>) -> Result<Self> {
        let mut idx = attractor_indices;
        idx.sort_unstable();
        idx.dedup();
        let n1 = cost.nrows().saturating_sub(idx.len());
        let p = StabilizationProblem {
            attractor_indices: idx,
            gamma,
            m_vec: DVector::from_element(n1, T::one()),
            cost,
            normalize: false,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn n_basis(&self) -> usize {
        self.cost.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.cost.ncols()
    }

    /// Non-attractor indices in increasing order.
    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.n_basis()).filter(|j| self.attractor_indices.binary_search(j).is_err()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_basis();
        if self.attractor_indices.is_empty() {
            return Err(Error::Config("attractor index set must be nonempty".into()));
        }
        if let Some(&j) = self.attractor_indices.iter().find(|&&j| j >= k) {
            return Err(Error::Config(format!("attractor index {j} out of range for {k} basis elements")));
        }
        if self.attractor_indices.len() >= k {
            return Err(Error::AllStatesAttractor);
        }
        if !(self.gamma > T::zero()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        let n1 = k - self.attractor_indices.len();
        if self.m_vec.len() != n1 {
            return Err(Error::DimensionMismatch {
                expected: n1,
                got: self.m_vec.len(),
            });
        }
        if self.m_vec.iter().any(|&v| v < T::zero()) || self.m_vec.iter().all(|&v| v == T::zero()) {
            return Err(Error::Config("reference measure must be nonnegative and nonzero".into()));
        }
        if self.cost.iter().any(|&v| v < T::zero() || !v.is_finite_value()) {
            return Err(Error::Config("stage cost must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Deletes the attractor rows and columns.
pub fn restrict_operator<T: Real>(p: &PfMatrix<T>, attractor_indices: &[usize]) -> Result<DMatrix<T>> {
    let k = p.dim();
    let keep: Vec<usize> = (0..k).filter(|j| !attractor_indices.contains(j)).collect();
    if keep.is_empty() {
        return Err(Error::AllStatesAttractor);
    }
    Ok(DMatrix::from_fn(keep.len(), keep.len(), |i, j| p.p_mat[(keep[i], keep[j])]))
}

/// Variables are `θ` stacked action-major (`z[a·n₁ + j] = θ_a^j`), followed
/// by the `n₁` slack entries of `m` when normalization is on.
pub fn assemble_lp<T: Real>(bank: &OperatorBank<T>, prob: &StabilizationProblem<T>) -> Result<LpProblem<T>> {
    bank.validate(None)?;
    prob.validate()?;
    if bank.n_basis() != prob.n_basis() || bank.n_actions() != prob.n_actions() {
        return Err(Error::DimensionMismatch {
            expected: prob.n_basis(),
            got: bank.n_basis(),
        });
    }
    let free = prob.free_indices();
    let n1 = free.len();
    let m = bank.n_actions();
    let n_theta = n1 * m;
    let n_vars = if prob.normalize { n_theta + n1 } else { n_theta };
    let n_eq = if prob.normalize { 2 * n1 } else { n1 };
    let mut a_eq = DMatrix::zeros(n_eq, n_vars);
    let mut c = DVector::zeros(n_vars);
    for a in 0..m {
        let p1 = restrict_operator(&bank.p_list[a], &prob.attractor_indices)?;
        for j in 0..n1 {
            let col = a * n1 + j;
            c[col] = prob.cost[(free[j], a)];
            for i in 0..n1 {
                a_eq[(i, col)] -= prob.gamma * p1[(i, j)];
            }
            a_eq[(j, col)] += T::one();
            if prob.normalize {
                a_eq[(n1 + j, col)] = T::one();
            }
        }
    }
    let mut lb = DVector::zeros(n_vars);
    let b_eq = if prob.normalize {
        for i in 0..n1 {
            a_eq[(i, n_theta + i)] = -T::one();
            lb[n_theta + i] = T::lit(NORMALIZE_SLACK_FLOOR);
        }
        let mut b = DVector::zeros(n_eq);
        b.rows_mut(n1, n1).fill(T::one());
        b
    } else {
        prob.m_vec.clone()
    };
    Ok(LpProblem { c, a_eq, b_eq, lb })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OccupationSolution<T> {
    /// `n₁ × M`, rows follow [`StabilizationProblem::free_indices`].
    pub theta: DMatrix<T>,
    pub objective: T,
    pub status: SolveStatus<T>,
    /// Reference measure the solution balances (the slack when normalized).
    pub m_used: DVector<T>,
}

/// Solves the stabilization LP. Infeasibility means no randomized policy
/// stabilizes the chain at this `γ` in this basis.
pub fn solve_stabilization<T: Real>(
    bank: &OperatorBank<T>,
    prob: &StabilizationProblem<T>,
    opts: SolverOptions<T>,
) -> Result<OccupationSolution<T>> {
    let lp = assemble_lp(bank, prob)?;
    let sol = solve_lp(&lp, opts)?;
    match sol.status.state {
        SolveState::Optimal => {}
        SolveState::Infeasible => {
            return Err(Error::Infeasible(format!(
                "no stabilizing randomized policy exists in this basis at gamma = {}; try a smaller gamma",
                prob.gamma
            )))
        }
        SolveState::Unbounded => return Err(Error::Unbounded),
        SolveState::MaxIter => return Err(Error::MaxIterExceeded(sol.status.iterations)),
    }
    let n1 = prob.m_vec.len();
    let m = bank.n_actions();
    let theta = DMatrix::from_fn(n1, m, |j, a| sol.z[a * n1 + j].max(T::zero()));
    let m_used = if prob.normalize {
        sol.z.rows(n1 * m, n1).into_owned()
    } else {
        prob.m_vec.clone()
    };
    Ok(OccupationSolution {
        theta,
        objective: sol.status.objective,
        status: sol.status,
        m_used,
    })
}

/// `‖Σ_a θ_a − γ Σ_a P¹_a θ_a − m‖_∞`.
pub fn balance_residual<T: Real>(bank: &OperatorBank<T>, prob: &StabilizationProblem<T>, sol: &OccupationSolution<T>) -> Result<T> {
    let n1 = sol.theta.nrows();
    let mut r = -&sol.m_used;
    for a in 0..bank.n_actions() {
        let p1 = restrict_operator(&bank.p_list[a], &prob.attractor_indices)?;
        let th = sol.theta.column(a).into_owned();
        r += &th - p1 * &th * prob.gamma;
    }
    debug_assert_eq!(r.len(), n1);
    Ok(r.amax())
}

/// `Σ_a (G¹_a)ᵀ θ_a`.
pub fn evaluate_cost<T: Real>(sol: &OccupationSolution<T>, prob: &StabilizationProblem<T>) -> T {
    let free = prob.free_indices();
    let mut total = T::zero();
    for a in 0..sol.theta.ncols() {
        for (j, &f) in free.iter().enumerate() {
            total += prob.cost[(f, a)] * sol.theta[(j, a)];
        }
    }
    total
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    /// `Σ_j u^{a(j)} ψ_j(x)`.
    UnnormalizedSum,
    /// `Σ_j u^{a(j)} ψ_j(x) / Σ_j ψ_j(x)`.
    #[default]
    PartitionOfUnity,
    /// `u^{a(j*)}` for the nearest center `j*`.
    NearestCenter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Policy<T> {
    /// Action index for every basis element; attractor elements carry the
    /// zero action.
    pub action_of: Vec<usize>,
    pub attractor_indices: Vec<usize>,
    /// Basis elements whose occupation row was empty; their action minimizes
    /// the one-step cost instead.
    pub flagged: Vec<usize>,
    pub grid: ControlGrid<T>,
    pub feedback_mode: FeedbackMode,
    pub grid_snap: bool,
}

impl<T: Real> Policy<T> {
    pub fn is_attractor(&self, j: usize) -> bool {
        self.attractor_indices.binary_search(&j).is_ok()
    }

    /// Control attached to basis element `j` (zero on the attractor).
    pub fn control_of(&self, j: usize) -> DVector<T> {
        if self.is_attractor(j) {
            DVector::zeros(self.grid.dim())
        } else {
            self.grid.values[self.action_of[j]].clone()
        }
    }
}

/// Row-wise argmax of `θ`, ties toward the smallest action index.
pub fn extract_policy<T: Real>(
    sol: &OccupationSolution<T>,
    bank: &OperatorBank<T>,
    prob: &StabilizationProblem<T>,
    feedback_mode: FeedbackMode,
    grid_snap: bool,
) -> Policy<T> {
    let zero = bank.actions.zero_action();
    let mut action_of = vec![zero; prob.n_basis()];
    let mut flagged = Vec::new();
    for (row, &j) in prob.free_indices().iter().enumerate() {
        let theta = sol.theta.row(row);
        let mut best = 0;
        for a in 1..theta.len() {
            if theta[a] > theta[best] {
                best = a;
            }
        }
        if theta[best] < T::lit(UNVISITED_THRESHOLD) {
            let costs = prob.cost.row(j);
            best = 0;
            for a in 1..costs.len() {
                if costs[a] < costs[best] {
                    best = a;
                }
            }
            flagged.push(j);
        }
        action_of[j] = best;
    }
    if !flagged.is_empty() {
        warn!("{} basis elements received no occupation mass", flagged.len());
    }
    Policy {
        action_of,
        attractor_indices: prob.attractor_indices.clone(),
        flagged,
        grid: bank.actions.clone(),
        feedback_mode,
        grid_snap,
    }
}

/// Evaluates the synthesized feedback law at `x`.
pub fn feedback<T: Real>(policy: &Policy<T>, dict: &RbfDictionary<T>, x: &DVector<T>) -> Result<DVector<T>> {
    if policy.action_of.len() != dict.len() {
        return Err(Error::DimensionMismatch {
            expected: dict.len(),
            got: policy.action_of.len(),
        });
    }
    let d = policy.grid.dim();
    let u = match policy.feedback_mode {
        FeedbackMode::UnnormalizedSum => {
            let psi = dict.eval(x)?;
            let mut u = DVector::zeros(d);
            for (j, &w) in psi.iter().enumerate() {
                if !policy.is_attractor(j) {
                    u += &policy.grid.values[policy.action_of[j]] * w;
                }
            }
            u
        }
        FeedbackMode::PartitionOfUnity => {
            let w = dict.normalized_weights(x)?;
            let mut u = DVector::zeros(d);
            for (j, &wj) in w.iter().enumerate() {
                if !policy.is_attractor(j) {
                    u += &policy.grid.values[policy.action_of[j]] * wj;
                }
            }
            u
        }
        FeedbackMode::NearestCenter => policy.control_of(dict.nearest_center(x)?),
    };
    Ok(if policy.grid_snap {
        policy.grid.values[policy.grid.nearest(&u)].clone()
    } else {
        u
    })
}

/// Column `j` of the closed-loop matrix is column `j` of `P_{a(j)}`;
/// attractor columns use the zero action.
pub fn closed_loop_pf<T: Real>(bank: &OperatorBank<T>, policy: &Policy<T>) -> Result<PfMatrix<T>> {
    let k = bank.n_basis();
    if policy.action_of.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: policy.action_of.len(),
        });
    }
    let zero = bank.actions.zero_action();
    let mut p = DMatrix::zeros(k, k);
    for j in 0..k {
        let a = if policy.is_attractor(j) { zero } else { policy.action_of[j] };
        let src = bank.p_list.get(a).ok_or(Error::MissingAction(a))?;
        p.set_column(j, &src.p_mat.column(j));
    }
    Ok(PfMatrix::new(p))
}

pub const CERTIFICATE_POWER_TOL: f64 = 1e-10;
pub const CERTIFICATE_POWER_MAX_ITER: usize = 100_000;
pub const CERTIFICATE_MU_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovCertificate<T> {
    pub gamma: T,
    /// Power-iteration estimate of `ρ(γ P¹_cl)`.
    pub spectral_radius: T,
    /// Collatz–Wielandt upper bound on the same radius.
    pub spectral_upper_bound: T,
    pub power_iterations: usize,
    pub power_converged: bool,
    /// `1/γ`.
    pub decay_bound: T,
    /// Solution of `(I − γ P¹_cl) μ = m` on the non-attractor indices
    /// (empty when the radius test already failed).
    pub mu_bar: Vec<T>,
    pub min_mu: Option<T>,
    /// `‖(I − γ P¹_cl) μ − m‖_∞`.
    pub residual: Option<T>,
    pub pass: bool,
}

pub fn lyapunov_certificate<T: Real>(p_cl: &PfMatrix<T>, prob: &StabilizationProblem<T>) -> Result<LyapunovCertificate<T>> {
    prob.validate()?;
    let p1 = restrict_operator(p_cl, &prob.attractor_indices)?;
    let b = &p1 * prob.gamma;
    let est = spectral_radius(&b, T::lit(CERTIFICATE_POWER_TOL), CERTIFICATE_POWER_MAX_ITER);
    let radius_ok = if est.converged {
        est.rho < T::one()
    } else {
        warn!("{}", Error::PowerIterationStall(est.iterations));
        est.upper_bound < T::one()
    };
    let mut cert = LyapunovCertificate {
        gamma: prob.gamma,
        spectral_radius: est.rho,
        spectral_upper_bound: est.upper_bound,
        power_iterations: est.iterations,
        power_converged: est.converged,
        decay_bound: T::one() / prob.gamma,
        mu_bar: Vec::new(),
        min_mu: None,
        residual: None,
        pass: false,
    };
    if !radius_ok {
        return Ok(cert);
    }
    let n1 = p1.nrows();
    let sys = DMatrix::identity(n1, n1) - &b;
    if let Some(mu) = sys.clone().lu().solve(&prob.m_vec) {
        let min_mu = mu.min();
        let residual = (&sys * &mu - &prob.m_vec).amax();
        cert.pass = min_mu >= -T::lit(CERTIFICATE_MU_TOL) && mu.iter().all(|v| v.is_finite_value());
        cert.min_mu = Some(min_mu);
        cert.residual = Some(residual);
        cert.mu_bar = mu.iter().copied().collect();
    }
    Ok(cert)
}
