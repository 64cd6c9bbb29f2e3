//! Two-phase revised simplex on a dense explicit basis inverse.
//!
//! Pricing is Dantzig's rule (smallest index on ties); after a run of
//! degenerate pivots the solver switches to Bland's rule until it makes
//! progress again, so it cannot cycle.

use nalgebra::{DMatrix, DVector};

use super::{LpProblem, Solution, SolveState, SolveStatus, SolverOptions};
use crate::error::Result;
use crate::scalar::Real;

const REFACTOR_EVERY: usize = 64;
const DEGENERATE_STREAK: usize = 50;

struct Tableau<'a, T> {
    a: &'a DMatrix<T>,
    b: DVector<T>,
    m: usize,
    n: usize,
    basis: Vec<usize>,
    binv: DMatrix<T>,
    x_b: DVector<T>,
    since_refactor: usize,
    piv_tol: T,
    feas_tol: T,
}

enum Outcome {
    Optimal,
    Unbounded(usize),
    MaxIter,
}

impl<'a, T: Real> Tableau<'a, T> {
    /// Column `j` of `[A | I]`.
    fn column(&self, j: usize) -> DVector<T> {
        if j < self.n {
            self.a.column(j).into_owned()
        } else {
            let mut e = DVector::zeros(self.m);
            e[j - self.n] = T::one();
            e
        }
    }

    fn refactor(&mut self) {
        let mut bmat = DMatrix::zeros(self.m, self.m);
        for (k, &j) in self.basis.iter().enumerate() {
            bmat.set_column(k, &self.column(j));
        }
        if let Some(inv) = bmat.try_inverse() {
            self.binv = inv;
            self.x_b = &self.binv * &self.b;
        }
        self.since_refactor = 0;
    }

    fn duals(&self, cost: &DVector<T>) -> DVector<T> {
        let c_b = DVector::from_iterator(self.m, self.basis.iter().map(|&j| cost[j]));
        self.binv.tr_mul(&c_b)
    }

    /// Reduced costs of all `[A | I]` columns.
    fn reduced_costs(&self, cost: &DVector<T>, y: &DVector<T>) -> DVector<T> {
        let mut d = cost.clone();
        let ay = self.a.tr_mul(y);
        for j in 0..self.n {
            d[j] -= ay[j];
        }
        for i in 0..self.m {
            d[self.n + i] -= y[i];
        }
        d
    }

    fn pivot(&mut self, row: usize, entering: usize, alpha: &DVector<T>) {
        let theta = self.x_b[row] / alpha[row];
        for i in 0..self.m {
            if i != row {
                self.x_b[i] -= theta * alpha[i];
            }
        }
        self.x_b[row] = theta;
        let piv = alpha[row];
        let mut prow = self.binv.row(row).into_owned();
        prow /= piv;
        for i in 0..self.m {
            if i != row && alpha[i] != T::zero() {
                let f = alpha[i];
                for (j, &pv) in prow.iter().enumerate() {
                    self.binv[(i, j)] -= f * pv;
                }
            }
        }
        self.binv.set_row(row, &prow);
        self.basis[row] = entering;
        self.since_refactor += 1;
        if self.since_refactor >= REFACTOR_EVERY {
            self.refactor();
        }
    }

    /// Runs the simplex loop for `cost` over columns admitted by `allowed`.
    fn run(&mut self, cost: &DVector<T>, allowed: &dyn Fn(usize) -> bool, dual_tol: T, iters: &mut usize, max_iter: usize) -> Outcome {
        let mut degenerate = 0usize;
        loop {
            if *iters >= max_iter {
                return Outcome::MaxIter;
            }
            let y = self.duals(cost);
            let d = self.reduced_costs(cost, &y);
            let mut in_basis = vec![false; self.n + self.m];
            for &j in &self.basis {
                in_basis[j] = true;
            }
            let bland = degenerate >= DEGENERATE_STREAK;
            let mut entering = None;
            let mut best = -dual_tol;
            for j in 0..(self.n + self.m) {
                if in_basis[j] || !allowed(j) {
                    continue;
                }
                if d[j] < best {
                    entering = Some(j);
                    if bland {
                        break;
                    }
                    best = d[j];
                }
            }
            let Some(q) = entering else {
                return Outcome::Optimal;
            };
            let alpha = &self.binv * self.column(q);
            let mut leave: Option<usize> = None;
            let mut best_ratio = T::zero();
            for i in 0..self.m {
                if alpha[i] > self.piv_tol {
                    let ratio = self.x_b[i].max(T::zero()) / alpha[i];
                    let better = match leave {
                        None => true,
                        Some(r) => {
                            let tie = (ratio - best_ratio).abs() <= T::lit(1e-12) * (T::one() + best_ratio);
                            if tie {
                                if bland {
                                    self.basis[i] < self.basis[r]
                                } else {
                                    alpha[i] > alpha[r]
                                }
                            } else {
                                ratio < best_ratio
                            }
                        }
                    };
                    if better {
                        leave = Some(i);
                        best_ratio = ratio;
                    }
                }
            }
            let Some(r) = leave else {
                return Outcome::Unbounded(q);
            };
            if best_ratio <= self.feas_tol {
                degenerate += 1;
            } else {
                degenerate = 0;
            }
            self.pivot(r, q, &alpha);
            *iters += 1;
        }
    }
}

/// Solves `min cᵀz  s.t.  A z = b,  z ≥ lb`.
///
/// `Infeasible` is returned only with a Farkas ray `y` (`Aᵀy ≤ 0`,
/// `yᵀ(b − A·lb) > 0`) in `certificate`; `Unbounded` carries an improving
/// recession direction.
pub fn solve_lp<T: Real>(p: &LpProblem<T>, opts: SolverOptions<T>) -> Result<Solution<T>> {
    p.validate()?;
    let m = p.n_eq();
    let n = p.n_vars();
    let tol = opts.tol;

    // shift to w = z - lb ≥ 0 and make the right-hand side nonnegative
    let mut a = p.a_eq.clone();
    let mut b = &p.b_eq - &p.a_eq * &p.lb;
    let mut sign = vec![T::one(); m];
    for i in 0..m {
        if b[i] < T::zero() {
            sign[i] = -T::one();
            b[i] = -b[i];
            let mut row = a.row_mut(i);
            row.neg_mut();
        }
    }
    let scale = T::one() + b.amax();
    let mut tab = Tableau {
        a: &a,
        b: b.clone(),
        m,
        n,
        basis: (n..n + m).collect(),
        binv: DMatrix::identity(m, m),
        x_b: b.clone(),
        since_refactor: 0,
        piv_tol: T::lit(1e-11),
        feas_tol: tol * T::lit(1e-3),
    };
    let mut iters = 0usize;

    // phase 1
    let mut cost1 = DVector::zeros(n + m);
    for i in 0..m {
        cost1[n + i] = T::one();
    }
    let phase1 = tab.run(&cost1, &|_| true, tol * T::lit(1e-2), &mut iters, opts.max_iter);
    tab.refactor();
    let infeas: T = tab
        .basis
        .iter()
        .zip(tab.x_b.iter())
        .filter(|(&j, _)| j >= n)
        .fold(T::zero(), |acc, (_, &v)| acc + v.max(T::zero()));
    if matches!(phase1, Outcome::MaxIter) {
        return Ok(finish(p, &tab, &sign, SolveState::MaxIter, iters, None));
    }
    if infeas > tol * scale {
        let y = tab.duals(&cost1);
        let ray = DVector::from_iterator(m, y.iter().zip(&sign).map(|(&v, &s)| v * s));
        return Ok(finish(p, &tab, &sign, SolveState::Infeasible, iters, Some(ray)));
    }

    // drive zero-level artificials out of the basis where possible
    for r in 0..m {
        if tab.basis[r] < n {
            continue;
        }
        let row = tab.binv.row(r).into_owned();
        let coeffs = row * &a;
        let mut pick = None;
        let mut best = T::lit(1e-9);
        for j in 0..n {
            if !tab.basis.contains(&j) && coeffs[j].abs() > best {
                best = coeffs[j].abs();
                pick = Some(j);
            }
        }
        if let Some(j) = pick {
            let alpha = &tab.binv * tab.column(j);
            tab.pivot(r, j, &alpha);
        }
    }
    tab.refactor();

    // phase 2
    let mut cost2 = DVector::zeros(n + m);
    cost2.rows_mut(0, n).copy_from(&p.c);
    let dual_tol = tol * T::lit(1e-2) * (T::one() + p.c.amax());
    let outcome = tab.run(&cost2, &|j| j < n, dual_tol, &mut iters, opts.max_iter);
    tab.refactor();
    match outcome {
        Outcome::Optimal => Ok(finish(p, &tab, &sign, SolveState::Optimal, iters, None)),
        Outcome::MaxIter => Ok(finish(p, &tab, &sign, SolveState::MaxIter, iters, None)),
        Outcome::Unbounded(q) => {
            let alpha = &tab.binv * tab.column(q);
            let mut dir = DVector::zeros(n);
            dir[q] = T::one();
            for (i, &j) in tab.basis.iter().enumerate() {
                if j < n {
                    dir[j] = -alpha[i];
                }
            }
            Ok(finish(p, &tab, &sign, SolveState::Unbounded, iters, Some(dir)))
        }
    }
}

fn finish<T: Real>(
    p: &LpProblem<T>,
    tab: &Tableau<'_, T>,
    sign: &[T],
    state: SolveState,
    iterations: usize,
    certificate: Option<DVector<T>>,
) -> Solution<T> {
    let n = p.n_vars();
    let m = p.n_eq();
    let mut z = p.lb.clone();
    for (i, &j) in tab.basis.iter().enumerate() {
        if j < n {
            z[j] += tab.x_b[i].max(T::zero());
        }
    }
    let mut cost = DVector::zeros(n + m);
    cost.rows_mut(0, n).copy_from(&p.c);
    let y_int = tab.duals(&cost);
    let y = DVector::from_iterator(m, y_int.iter().zip(sign).map(|(&v, &s)| v * s));
    let reduced = &p.c - p.a_eq.tr_mul(&y);
    let objective = p.c.dot(&z);
    let primal_feas = (&p.a_eq * &z - &p.b_eq)
        .amax()
        .max((&p.lb - &z).iter().fold(T::zero(), |a, &v| a.max(v)));
    let dual_feas = reduced.iter().fold(T::zero(), |a, &v| a.max(-v));
    let dual_obj = p.b_eq.dot(&y) + p.lb.dot(&reduced);
    let gap = (objective - dual_obj).abs();
    Solution {
        z,
        status: SolveStatus {
            state,
            objective,
            primal_feas,
            dual_feas,
            gap,
            iterations,
        },
        duals: y,
        certificate,
    }
}
