//! Dense LP and convex QP kernels.
//!
//! Both solvers are deterministic: the simplex uses fixed pricing and
//! tie-breaking rules, the interior point method has no randomized start.

mod lp;
mod qp;

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub use lp::solve_lp;
pub use qp::solve_qp;

/// `min cᵀz  s.t.  A_eq z = b_eq,  z ≥ lb`.
#[derive(Clone, Debug, PartialEq)]
pub struct LpProblem<T> {
    pub c: DVector<T>,
    pub a_eq: DMatrix<T>,
    pub b_eq: DVector<T>,
    pub lb: DVector<T>,
}

impl<T: Real> LpProblem<T> {
    /// Problem with all lower bounds at zero.
    pub fn nonnegative(c: DVector<T>, a_eq: DMatrix<T>, b_eq: DVector<T>) -> Self {
        let n = c.len();
        LpProblem {
            c,
            a_eq,
            b_eq,
            lb: DVector::zeros(n),
        }
    }

    pub fn n_vars(&self) -> usize {
        self.c.len()
    }

    pub fn n_eq(&self) -> usize {
        self.b_eq.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_vars();
        if self.a_eq.ncols() != n || self.lb.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: if self.a_eq.ncols() != n { self.a_eq.ncols() } else { self.lb.len() },
            });
        }
        if self.a_eq.nrows() != self.n_eq() {
            return Err(Error::DimensionMismatch {
                expected: self.n_eq(),
                got: self.a_eq.nrows(),
            });
        }
        if !self.lb.iter().all(|v| v.is_finite_value()) {
            return Err(Error::Config("LP lower bounds must be finite".into()));
        }
        Ok(())
    }

    /// Plain-text dump (`c`, `A_eq`, `b_eq`, `lb` sections) for offline debugging.
    pub fn dump<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# lp n_vars={} n_eq={}", self.n_vars(), self.n_eq())?;
        dump_vector(&mut w, "c", &self.c)?;
        dump_matrix(&mut w, "A_eq", &self.a_eq)?;
        dump_vector(&mut w, "b_eq", &self.b_eq)?;
        dump_vector(&mut w, "lb", &self.lb)
    }
}

/// `min ½zᵀHz + fᵀz  s.t.  A_eq z = b_eq,  A_ineq z ≥ b_ineq`.
#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem<T> {
    pub h: DMatrix<T>,
    pub f: DVector<T>,
    pub a_eq: DMatrix<T>,
    pub b_eq: DVector<T>,
    pub a_ineq: DMatrix<T>,
    pub b_ineq: DVector<T>,
}

impl<T: Real> QpProblem<T> {
    pub fn unconstrained(h: DMatrix<T>, f: DVector<T>) -> Self {
        let n = f.len();
        QpProblem {
            h,
            f,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_ineq: DMatrix::zeros(0, n),
            b_ineq: DVector::zeros(0),
        }
    }

    pub fn n_vars(&self) -> usize {
        self.f.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_vars();
        let shape_ok = self.h.nrows() == n
            && self.h.ncols() == n
            && self.a_eq.ncols() == n
            && self.a_eq.nrows() == self.b_eq.len()
            && self.a_ineq.ncols() == n
            && self.a_ineq.nrows() == self.b_ineq.len();
        if !shape_ok {
            return Err(Error::Config("QP dimensions are inconsistent".into()));
        }
        let asym = (&self.h - self.h.transpose()).amax();
        if asym > T::lit(1e-10) * (T::one() + self.h.amax()) {
            return Err(Error::Config(format!("QP Hessian is not symmetric (max asymmetry {asym:e})")));
        }
        if n > 0 {
            let min_eig = self.h.clone().symmetric_eigenvalues().min();
            if min_eig < T::lit(-1e-9) * (T::one() + self.h.amax()) {
                return Err(Error::Config(format!("QP Hessian is not PSD (min eigenvalue {min_eig:e})")));
            }
        }
        Ok(())
    }

    pub fn objective(&self, z: &DVector<T>) -> T {
        (z.dot(&(&self.h * z))) * T::lit(0.5) + self.f.dot(z)
    }

    pub fn dump<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# qp n_vars={} n_eq={} n_ineq={}", self.n_vars(), self.b_eq.len(), self.b_ineq.len())?;
        dump_matrix(&mut w, "H", &self.h)?;
        dump_vector(&mut w, "f", &self.f)?;
        dump_matrix(&mut w, "A_eq", &self.a_eq)?;
        dump_vector(&mut w, "b_eq", &self.b_eq)?;
        dump_matrix(&mut w, "A_ineq", &self.a_ineq)?;
        dump_vector(&mut w, "b_ineq", &self.b_ineq)
    }
}

fn dump_vector<T: Real, W: Write>(w: &mut W, name: &str, v: &DVector<T>) -> io::Result<()> {
    writeln!(w, "{name} {}", v.len())?;
    let row: Vec<String> = v.iter().map(|x| format!("{x:.16e}")).collect();
    writeln!(w, "{}", row.join(" "))
}

fn dump_matrix<T: Real, W: Write>(w: &mut W, name: &str, m: &DMatrix<T>) -> io::Result<()> {
    writeln!(w, "{name} {} {}", m.nrows(), m.ncols())?;
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|x| format!("{x:.16e}")).collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveState {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveStatus<T> {
    pub state: SolveState,
    pub objective: T,
    pub primal_feas: T,
    pub dual_feas: T,
    pub gap: T,
    pub iterations: usize,
}

impl<T: Real> SolveStatus<T> {
    pub fn is_optimal(&self) -> bool {
        self.state == SolveState::Optimal
    }
}

/// Solver output. `duals` holds equality multipliers when available;
/// `certificate` holds a Farkas ray (Infeasible) or a recession direction
/// (Unbounded).
#[derive(Clone, Debug, PartialEq)]
pub struct Solution<T> {
    pub z: DVector<T>,
    pub status: SolveStatus<T>,
    pub duals: DVector<T>,
    pub certificate: Option<DVector<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions<T> {
    pub tol: T,
    pub max_iter: usize,
}

impl<T: Real> Default for SolverOptions<T> {
    fn default() -> Self {
        SolverOptions {
            tol: T::lit(1e-8),
            max_iter: 50_000,
        }
    }
}
