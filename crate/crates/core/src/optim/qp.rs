//! Mehrotra predictor-corrector interior point method for dense convex QPs.

use nalgebra::{DMatrix, DVector};

use super::{QpProblem, Solution, SolveState, SolveStatus, SolverOptions};
use crate::error::Result;
use crate::scalar::Real;

struct Residuals<T> {
    dual: DVector<T>,
    eq: DVector<T>,
    ineq: DVector<T>,
}

fn residuals<T: Real>(p: &QpProblem<T>, z: &DVector<T>, y: &DVector<T>, lam: &DVector<T>, s: &DVector<T>) -> Residuals<T> {
    Residuals {
        dual: &p.h * z + &p.f - p.a_eq.tr_mul(y) - p.a_ineq.tr_mul(lam),
        eq: &p.a_eq * z - &p.b_eq,
        ineq: &p.a_ineq * z - s - &p.b_ineq,
    }
}

fn max_step<T: Real>(v: &DVector<T>, dv: &DVector<T>) -> T {
    let mut alpha = T::one();
    for (&x, &d) in v.iter().zip(dv.iter()) {
        if d < T::zero() {
            alpha = alpha.min(-x / d);
        }
    }
    alpha
}

/// Solves `min ½zᵀHz + fᵀz  s.t.  A_eq z = b_eq,  A_ineq z ≥ b_ineq`.
pub fn solve_qp<T: Real>(p: &QpProblem<T>, opts: SolverOptions<T>) -> Result<Solution<T>> {
    p.validate()?;
    let n = p.n_vars();
    let me = p.b_eq.len();
    let mi = p.b_ineq.len();
    let tol = opts.tol;
    let reg = T::lit(1e-12) * (T::one() + p.h.amax());

    let mut z = DVector::<T>::zeros(n);
    let mut y = DVector::<T>::zeros(me);
    let mut s = (&p.a_ineq * &z - &p.b_ineq).map(|v| v.max(T::one()));
    let mut lam = DVector::<T>::from_element(mi, T::one());

    let scale_f = T::one() + p.f.amax();
    let scale_e = T::one() + p.b_eq.amax();
    let scale_i = T::one() + p.b_ineq.amax();
    let mut state = SolveState::MaxIter;
    let mut iterations = 0;

    for it in 0..opts.max_iter {
        iterations = it;
        let r = residuals(p, &z, &y, &lam, &s);
        let mu = if mi > 0 { s.dot(&lam) / T::from_usize_lossy(mi) } else { T::zero() };
        let converged = r.dual.amax() <= tol * scale_f
            && (me == 0 || r.eq.amax() <= tol * scale_e)
            && (mi == 0 || r.ineq.amax() <= tol * scale_i)
            && mu <= tol * tol;
        if converged {
            state = SolveState::Optimal;
            break;
        }
        let primal_res = if me > 0 { r.eq.amax() } else { T::zero() }.max(if mi > 0 { r.ineq.amax() } else { T::zero() });
        let dual_size = if me > 0 { y.amax() } else { T::zero() }.max(if mi > 0 { lam.amax() } else { T::zero() });
        if primal_res > tol * scale_e.max(scale_i) && dual_size > T::lit(1e12) {
            state = SolveState::Infeasible;
            break;
        }

        // reduced KKT matrix [[H + FᵀDF + reg, Eᵀ], [E, -reg]]
        let d = DVector::from_iterator(mi, lam.iter().zip(s.iter()).map(|(&l, &si)| l / si));
        let mut q = p.h.clone();
        if mi > 0 {
            let mut fd = p.a_ineq.clone();
            for (i, &di) in d.iter().enumerate() {
                let mut row = fd.row_mut(i);
                row *= di;
            }
            q += p.a_ineq.tr_mul(&fd);
        }
        let dim = n + me;
        let mut kkt = DMatrix::<T>::zeros(dim, dim);
        kkt.view_mut((0, 0), (n, n)).copy_from(&q);
        for i in 0..n {
            kkt[(i, i)] += reg;
        }
        if me > 0 {
            kkt.view_mut((0, n), (n, me)).copy_from(&p.a_eq.transpose());
            kkt.view_mut((n, 0), (me, n)).copy_from(&p.a_eq);
            for i in 0..me {
                kkt[(n + i, n + i)] = -reg;
            }
        }
        let lu = kkt.lu();

        // Solves for (Δz, Δy, Δλ, Δs) given the complementarity target r_c.
        let solve = |rc: &DVector<T>| -> Option<(DVector<T>, DVector<T>, DVector<T>, DVector<T>)> {
            // Δλ = S⁻¹ r_c − D(FΔz + r_i)
            let mut rhs = DVector::<T>::zeros(dim);
            let mut top = -&r.dual;
            if mi > 0 {
                let w = DVector::from_iterator(
                    mi,
                    (0..mi).map(|i| rc[i] / s[i] - d[i] * r.ineq[i]),
                );
                top += p.a_ineq.tr_mul(&w);
            }
            rhs.rows_mut(0, n).copy_from(&top);
            if me > 0 {
                rhs.rows_mut(n, me).copy_from(&(-&r.eq));
            }
            let sol = lu.solve(&rhs)?;
            let dz = sol.rows(0, n).into_owned();
            // the system was assembled with +Eᵀ, so the multiplier step flips sign
            let dy = -sol.rows(n, me).into_owned();
            let fdz = &p.a_ineq * &dz;
            let dlam = DVector::from_iterator(mi, (0..mi).map(|i| rc[i] / s[i] - d[i] * (fdz[i] + r.ineq[i])));
            let ds = &fdz + &r.ineq;
            Some((dz, dy, dlam, ds))
        };

        let rc_aff = DVector::from_iterator(mi, s.iter().zip(lam.iter()).map(|(&a, &b)| -a * b));
        let Some((_, _, dlam_a, ds_a)) = solve(&rc_aff) else {
            break;
        };
        let step = if mi > 0 {
            let a_p = max_step(&s, &ds_a);
            let a_d = max_step(&lam, &dlam_a);
            let a = a_p.min(a_d);
            let mu_aff = (&s + &ds_a * a).dot(&(&lam + &dlam_a * a)) / T::from_usize_lossy(mi);
            let sigma = if mu > T::zero() { (mu_aff / mu).powi(3) } else { T::zero() };
            let rc = DVector::from_iterator(
                mi,
                (0..mi).map(|i| -s[i] * lam[i] - ds_a[i] * dlam_a[i] + sigma * mu),
            );
            solve(&rc)
        } else {
            solve(&rc_aff)
        };
        let Some((dz, dy, dlam, ds)) = step else {
            break;
        };
        let frac = T::lit(0.995);
        let (ap, ad) = if mi > 0 {
            ((max_step(&s, &ds) * frac).min(T::one()), (max_step(&lam, &dlam) * frac).min(T::one()))
        } else {
            (T::one(), T::one())
        };
        let a = ap.min(ad);
        z += &dz * a;
        y += &dy * a;
        s += &ds * a;
        lam += &dlam * a;
    }

    let r = residuals(p, &z, &y, &lam, &s);
    let eq_viol = (&p.a_eq * &z - &p.b_eq).iter().fold(T::zero(), |m, &v| m.max(v.abs()));
    let ineq_viol = (&p.a_ineq * &z - &p.b_ineq).iter().fold(T::zero(), |m, &v| m.max(-v));
    let gap = if mi > 0 { s.dot(&lam).abs() } else { T::zero() };
    Ok(Solution {
        status: SolveStatus {
            state,
            objective: p.objective(&z),
            primal_feas: eq_viol.max(ineq_viol),
            dual_feas: if n > 0 { r.dual.amax() } else { T::zero() },
            gap,
            iterations,
        },
        z,
        duals: y,
        certificate: None,
    })
}
