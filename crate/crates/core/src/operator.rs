//! Koopman and Perron–Frobenius operator fitting with positivity and Markov
//! structure.
//!
//! The fitted problem is
//!
//! ```text
//! min_K ‖G K − A‖_F   s.t.  K ≥ 0,  Λ K Λ⁻¹ ≥ 0,  Λ K Λ⁻¹ 1 = 1
//! ```
//!
//! and the transfer matrix is recovered as `P = Λ⁻¹ Kᵀ Λ`. Because Λ is
//! symmetric, `P = (Λ K Λ⁻¹)ᵀ`, so the row-stochastic constraint on
//! `Λ K Λ⁻¹` is exactly column-stochasticity of `P`: column `j` holds the
//! distribution of mass leaving basis element `j`.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dictionary::{GramSet, LambdaMatrix};
use crate::error::{Error, Result};
use crate::linalg::{project_rows_to_simplex, spectral_apply, symmetric_pinv};
use crate::optim::{solve_qp, QpProblem, SolveState, SolverOptions};
use crate::scalar::Real;

/// Relative cutoff for the EDMD pseudo-inverse.
pub const EDMD_PINV_CUTOFF: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct KoopmanMatrix<T> {
    pub k_mat: DMatrix<T>,
    /// `‖G K − A‖_F`.
    pub fit_residual: T,
    /// Largest violation over the positivity and Markov constraints.
    pub constraint_violation: T,
    /// Set by the unconstrained fit when `G` was numerically singular.
    pub rank_deficient: bool,
}

/// Column-stochastic transfer matrix (columns = source, rows = destination).
#[derive(Clone, Debug, PartialEq)]
pub struct PfMatrix<T> {
    pub p_mat: DMatrix<T>,
}

impl<T: Real> PfMatrix<T> {
    pub fn new(p_mat: DMatrix<T>) -> Self {
        PfMatrix { p_mat }
    }

    pub fn dim(&self) -> usize {
        self.p_mat.nrows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NsdmdSolver {
    /// Dense QP for tiny dictionaries, matrix ADMM otherwise.
    Auto,
    /// Interior point on the vectorized problem (`K²` variables).
    DenseQp,
    /// Operator-splitting directly on matrices.
    MatrixAdmm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NsdmdConfig<T> {
    pub tol_feas: T,
    pub tol_opt: T,
    pub max_iter: usize,
    pub post_project: bool,
    pub solver: NsdmdSolver,
}

impl<T: Real> Default for NsdmdConfig<T> {
    fn default() -> Self {
        NsdmdConfig {
            tol_feas: T::lit(1e-8),
            tol_opt: T::lit(1e-7),
            max_iter: 20_000,
            post_project: true,
            solver: NsdmdSolver::Auto,
        }
    }
}

impl<T: Real> NsdmdConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_feas > T::zero()) || !(self.tol_opt > T::zero()) {
            return Err(Error::Config("NSDMD tolerances must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("NSDMD max_iter must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics<T> {
    pub status: SolveState,
    pub iterations: usize,
    /// Residual of the unconstrained EDMD fit on the same Gram matrices.
    pub edmd_residual: T,
    /// Largest entry change made by the post-solve projection of `P`.
    pub projection_deviation: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NsdmdFit<T> {
    pub koopman: KoopmanMatrix<T>,
    pub pf: PfMatrix<T>,
    pub diagnostics: FitDiagnostics<T>,
}

fn residual<T: Real>(grams: &GramSet<T>, k: &DMatrix<T>) -> T {
    (&grams.g * k - &grams.a).norm()
}

/// Plain EDMD: `K₀ = G⁺ A`.
pub fn fit_edmd_unconstrained<T: Real>(grams: &GramSet<T>) -> Result<KoopmanMatrix<T>> {
    if grams.g.amax() == T::zero() {
        return Err(Error::Config("Gram matrix G is zero".into()));
    }
    let (pinv, rank) = symmetric_pinv(&grams.g, T::lit(EDMD_PINV_CUTOFF));
    let k_mat = pinv * &grams.a;
    Ok(KoopmanMatrix {
        fit_residual: residual(grams, &k_mat),
        constraint_violation: T::zero(),
        rank_deficient: rank < grams.g.nrows(),
        k_mat,
    })
}

/// `P = Λ⁻¹ Kᵀ Λ`.
pub fn pf_from_koopman<T: Real>(k: &KoopmanMatrix<T>, lam: &LambdaMatrix<T>) -> Result<PfMatrix<T>> {
    let n = lam.lambda.nrows();
    if k.k_mat.nrows() != n || k.k_mat.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: k.k_mat.nrows(),
        });
    }
    let rhs = k.k_mat.transpose() * &lam.lambda;
    let p = match lam.lambda.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => lam.lambda.clone().lu().solve(&rhs).ok_or(Error::SingularLambda)?,
    };
    if !p.iter().all(|v| v.is_finite_value()) {
        return Err(Error::SingularLambda);
    }
    Ok(PfMatrix::new(p))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovReport<T> {
    /// `max(0, -min_ij P_ij)`.
    pub max_negative_entry: T,
    /// `max_j |Σ_i P_ij − 1|`.
    pub max_column_sum_deviation: T,
    pub pass: bool,
}

pub fn validate_markov<T: Real>(p: &PfMatrix<T>, tol: T) -> MarkovReport<T> {
    let neg = p.p_mat.iter().fold(T::zero(), |a, &v| a.max(-v));
    let dev = p
        .p_mat
        .column_iter()
        .fold(T::zero(), |a, c| a.max((c.sum() - T::one()).abs()));
    MarkovReport {
        max_negative_entry: neg,
        max_column_sum_deviation: dev,
        pass: neg <= tol && dev <= tol,
    }
}

/// Largest violation of the three constraint families, measured on `K` and
/// on `P = Λ⁻¹KᵀΛ`.
pub fn constraint_violation<T: Real>(k: &DMatrix<T>, p: &PfMatrix<T>) -> T {
    let k_neg = k.iter().fold(T::zero(), |a, &v| a.max(-v));
    let report = validate_markov(p, T::zero());
    k_neg.max(report.max_negative_entry).max(report.max_column_sum_deviation)
}

/// Vectorized form of the fitting problem over `vec(K)` (column-major).
pub fn nsdmd_qp<T: Real>(grams: &GramSet<T>, lam: &LambdaMatrix<T>) -> Result<QpProblem<T>> {
    let n = grams.g.nrows();
    let lam_inv = lam.lambda.clone().try_inverse().ok_or(Error::SingularLambda)?;
    let nn = n * n;
    let idx = |i: usize, j: usize| i + j * n;
    let gtg = grams.g.tr_mul(&grams.g);
    let gta = grams.g.tr_mul(&grams.a);
    let mut h = DMatrix::zeros(nn, nn);
    for b in 0..n {
        h.view_mut((b * n, b * n), (n, n)).copy_from(&gtg);
    }
    let f = -DVector::from_column_slice(gta.as_slice());
    // rows 0..nn: K ≥ 0; rows nn..2nn: ΛKΛ⁻¹ ≥ 0
    let mut a_ineq = DMatrix::zeros(2 * nn, nn);
    for r in 0..nn {
        a_ineq[(r, r)] = T::one();
    }
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                for l in 0..n {
                    a_ineq[(nn + idx(i, j), idx(k, l))] = lam.lambda[(i, k)] * lam_inv[(l, j)];
                }
            }
        }
    }
    let v = lam_inv.row_sum().transpose();
    let mut a_eq = DMatrix::zeros(n, nn);
    for i in 0..n {
        for k in 0..n {
            for l in 0..n {
                a_eq[(i, idx(k, l))] = lam.lambda[(i, k)] * v[l];
            }
        }
    }
    Ok(QpProblem {
        h,
        f,
        a_eq,
        b_eq: DVector::from_element(n, T::one()),
        a_ineq,
        b_ineq: DVector::zeros(2 * nn),
    })
}

const DENSE_AUTO_MAX: usize = 8;

/// Fits the structured Koopman matrix and its transfer matrix.
pub fn fit_nsdmd<T: Real>(grams: &GramSet<T>, lam: &LambdaMatrix<T>, cfg: &NsdmdConfig<T>) -> Result<NsdmdFit<T>> {
    cfg.validate()?;
    let n = grams.g.nrows();
    if grams.g.ncols() != n || grams.a.shape() != (n, n) || lam.lambda.shape() != (n, n) {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: lam.lambda.nrows(),
        });
    }
    let edmd = fit_edmd_unconstrained(grams)?;
    let use_dense = match cfg.solver {
        NsdmdSolver::DenseQp => true,
        NsdmdSolver::MatrixAdmm => false,
        NsdmdSolver::Auto => n <= DENSE_AUTO_MAX,
    };
    let (k_mat, p_raw, status, iterations) = if use_dense {
        let qp = nsdmd_qp(grams, lam)?;
        let sol = solve_qp(
            &qp,
            SolverOptions {
                tol: cfg.tol_feas.min(cfg.tol_opt),
                max_iter: cfg.max_iter.min(500),
            },
        )?;
        if sol.status.state == SolveState::Infeasible {
            return Err(Error::Infeasible("NSDMD constraints are inconsistent".into()));
        }
        let k_mat = DMatrix::from_column_slice(n, n, sol.z.as_slice());
        let p = pf_from_koopman(
            &KoopmanMatrix {
                k_mat: k_mat.clone(),
                fit_residual: T::zero(),
                constraint_violation: T::zero(),
                rank_deficient: false,
            },
            lam,
        )?;
        (k_mat, p.p_mat, sol.status.state, sol.status.iterations)
    } else {
        let out = admm(grams, lam, cfg, &edmd.k_mat)?;
        (out.k, out.m.transpose(), out.state, out.iterations)
    };
    let raw = PfMatrix::new(p_raw);
    let violation = constraint_violation(&k_mat, &raw);
    let mut pf = raw.clone();
    let mut projection_deviation = T::zero();
    if cfg.post_project {
        pf = project_columns(&raw);
        projection_deviation = (&pf.p_mat - &raw.p_mat).amax();
        if projection_deviation > T::lit(1e-6) {
            warn!("post-projection moved P by {projection_deviation:e}");
        }
    }
    if status == SolveState::MaxIter {
        warn!("NSDMD hit the iteration limit (violation {violation:e})");
    }
    debug!(
        "nsdmd: n={n} iters={iterations} residual={:e} edmd={:e} violation={violation:e}",
        residual(grams, &k_mat),
        edmd.fit_residual
    );
    Ok(NsdmdFit {
        koopman: KoopmanMatrix {
            fit_residual: residual(grams, &k_mat),
            constraint_violation: violation,
            rank_deficient: edmd.rank_deficient,
            k_mat,
        },
        pf,
        diagnostics: FitDiagnostics {
            status,
            iterations,
            edmd_residual: edmd.fit_residual,
            projection_deviation,
        },
    })
}

/// Zeroes negative entries and rescales each column to sum to one.
pub fn project_columns<T: Real>(p: &PfMatrix<T>) -> PfMatrix<T> {
    let n = p.dim();
    let mut out = p.p_mat.map(|v| v.max(T::zero()));
    for j in 0..n {
        let s = out.column(j).sum();
        if s > T::zero() {
            let mut c = out.column_mut(j);
            c /= s;
        } else {
            // nothing left to rescale; keep the mass in place
            out.column_mut(j).fill(T::zero());
            out[(j, j)] = T::one();
        }
    }
    PfMatrix::new(out)
}

struct AdmmOutput<T> {
    k: DMatrix<T>,
    m: DMatrix<T>,
    state: SolveState,
    iterations: usize,
}

/// Cached factorizations for the equality-constrained ADMM step at one ρ.
struct AdmmFactors<T> {
    rho: T,
    q: DMatrix<T>,
    q_c: DMatrix<T>,
    q_lam: DMatrix<T>,
    s_vec: DMatrix<T>,
    denom: DMatrix<T>,
}

fn admm_factors<T: Real>(
    rho: T,
    h_eig: &nalgebra::SymmetricEigen<T, nalgebra::Dyn>,
    c: &DMatrix<T>,
    lam: &DMatrix<T>,
    lam_vals: &DVector<T>,
) -> AdmmFactors<T> {
    let n = lam.nrows();
    let q = spectral_apply(&h_eig.eigenvectors, &h_eig.eigenvalues, |v| T::one() / (v.max(T::zero()) + rho));
    let lam_q = lam * &q;
    let mut s = &lam_q * lam;
    s = (&s + s.transpose()) * T::lit(0.5);
    let s_eig = s.symmetric_eigen();
    let denom = DMatrix::from_fn(n, n, |i, j| {
        s_eig.eigenvalues[i].max(T::zero()) + lam_vals[j] * lam_vals[j] / rho
    });
    AdmmFactors {
        rho,
        q_c: &q * c,
        q_lam: &q * lam,
        q,
        s_vec: s_eig.eigenvectors,
        denom,
    }
}

/// Matrix ADMM on `min ½‖GK − A‖² + I(K'≥0) + I(M' rows in simplex)` with
/// the coupling `ΛK = MΛ` folded into the quadratic step. That step is an
/// equality-constrained least-squares problem whose multiplier solves the
/// Sylvester equation `S Y + Y Λ²/ρ = R` with `S = Λ(H+ρI)⁻¹Λ`; both
/// coefficient matrices are symmetric, so one eigendecomposition of each
/// diagonalizes it.
fn admm<T: Real>(grams: &GramSet<T>, lam: &LambdaMatrix<T>, cfg: &NsdmdConfig<T>, warm: &DMatrix<T>) -> Result<AdmmOutput<T>> {
    let n = grams.g.nrows();
    let g_scale = grams.g.clone().symmetric_eigenvalues().amax();
    if !(g_scale > T::zero()) {
        return Err(Error::Config("Gram matrix G is zero".into()));
    }
    let g = &grams.g / g_scale;
    let a = &grams.a / g_scale;
    let lam_scale = lam.lambda.diagonal().mean();
    let lam_m = &lam.lambda / lam_scale;
    let lam_eig = lam_m.clone().symmetric_eigen();
    if lam_eig.eigenvalues.min() <= T::zero() {
        return Err(Error::SingularLambda);
    }
    let lam_u = lam_eig.eigenvectors.clone();
    let lam_vals = lam_eig.eigenvalues.clone();
    let lam_inv = spectral_apply(&lam_u, &lam_vals, |v| T::one() / v);

    let h = g.tr_mul(&g);
    let c = g.tr_mul(&a);
    let h_eig = h.clone().symmetric_eigen();

    let alpha = T::lit(1.6);
    let one_minus_alpha = T::one() - alpha;
    let mut rho = T::lit(0.1);
    let mut fac = admm_factors(rho, &h_eig, &c, &lam_m, &lam_vals);

    // warm start: EDMD projected onto each constraint set
    let mut z1 = warm.map(|v| v.max(T::zero()));
    let mut z2 = &lam_m * warm * &lam_inv;
    project_rows_to_simplex(&mut z2);
    let mut u1 = DMatrix::<T>::zeros(n, n);
    let mut u2 = DMatrix::<T>::zeros(n, n);
    let mut k = z1.clone();
    let mut m = z2.clone();
    let mut state = SolveState::MaxIter;
    let mut iterations = cfg.max_iter;
    let grad_scale = T::one() + c.amax();

    for it in 0..cfg.max_iter {
        let v1 = &z1 - &u1;
        let v2 = &z2 - &u2;
        // W = Q(C + ρV1)
        let w = &fac.q_c + &fac.q * &v1 * fac.rho;
        let r = &lam_m * &w - &v2 * &lam_m;
        let r_t = fac.s_vec.tr_mul(&r) * &lam_u;
        let y_t = r_t.component_div(&fac.denom);
        let y = &fac.s_vec * y_t * lam_u.transpose();
        k = &w - &fac.q_lam * &y;
        m = &v2 + &y * &lam_m / fac.rho;

        let k_hat = &k * alpha + &z1 * one_minus_alpha;
        let m_hat = &m * alpha + &z2 * one_minus_alpha;
        let z1_old = std::mem::replace(&mut z1, (&k_hat + &u1).map(|v| v.max(T::zero())));
        let mut z2_new = &m_hat + &u2;
        project_rows_to_simplex(&mut z2_new);
        let z2_old = std::mem::replace(&mut z2, z2_new);
        u1 += &k_hat - &z1;
        u2 += &m_hat - &z2;

        let r_prim = (&k - &z1).amax().max((&m - &z2).amax());
        let r_dual = ((&z1 - &z1_old).amax().max((&z2 - &z2_old).amax())) * fac.rho;
        if r_prim <= cfg.tol_feas && r_dual <= cfg.tol_opt * grad_scale {
            state = SolveState::Optimal;
            iterations = it + 1;
            break;
        }
        if it % 500 == 499 {
            log::trace!("admm it={} r_prim={r_prim:e} r_dual={r_dual:e} rho={}", it + 1, fac.rho);
        }
        if it % 50 == 49 {
            let prim_rel = r_prim / (T::one() + k.amax().max(m.amax()));
            let dual_rel = r_dual / (T::one() + (u1.amax().max(u2.amax())) * fac.rho);
            if dual_rel > T::zero() {
                let ratio = (prim_rel / dual_rel).sqrt();
                if ratio > T::lit(5.0) || ratio < T::lit(0.2) {
                    let new_rho = (fac.rho * ratio).max(T::lit(1e-8)).min(T::lit(1e8));
                    let scale = fac.rho / new_rho;
                    u1 *= scale;
                    u2 *= scale;
                    rho = new_rho;
                    fac = admm_factors(rho, &h_eig, &c, &lam_m, &lam_vals);
                }
            }
        }
    }
    Ok(AdmmOutput { k, m, state, iterations })
}
