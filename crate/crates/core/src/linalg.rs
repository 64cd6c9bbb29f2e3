//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::scalar::Real;

/// Pseudo-inverse of a symmetric matrix through its eigendecomposition.
/// Eigenvalues with `|λ| ≤ rel_cutoff · max|λ|` are discarded.
/// Returns the pseudo-inverse and the numerical rank.
pub fn symmetric_pinv<T: Real>(m: &DMatrix<T>, rel_cutoff: T) -> (DMatrix<T>, usize) {
    let n = m.nrows();
    let eig = m.clone().symmetric_eigen();
    let max_abs = eig.eigenvalues.iter().fold(T::zero(), |a, &v| a.max(v.abs()));
    let cutoff = rel_cutoff * max_abs;
    let mut rank = 0;
    let inv = DVector::from_iterator(
        n,
        eig.eigenvalues.iter().map(|&v| {
            if v.abs() > cutoff && max_abs > T::zero() {
                rank += 1;
                T::one() / v
            } else {
                T::zero()
            }
        }),
    );
    let u = &eig.eigenvectors;
    let mut scaled = u.clone();
    for (j, &s) in inv.iter().enumerate() {
        let mut col = scaled.column_mut(j);
        col *= s;
    }
    (scaled * u.transpose(), rank)
}

/// `U diag(f(λ)) Uᵀ` for a symmetric eigendecomposition.
pub fn spectral_apply<T: Real>(vectors: &DMatrix<T>, values: &DVector<T>, f: impl Fn(T) -> T) -> DMatrix<T> {
    let mut scaled = vectors.clone();
    for (j, &v) in values.iter().enumerate() {
        let mut col = scaled.column_mut(j);
        col *= f(v);
    }
    scaled * vectors.transpose()
}

/// Euclidean projection of every row onto the probability simplex.
pub fn project_rows_to_simplex<T: Real>(m: &mut DMatrix<T>) {
    let n = m.ncols();
    let mut buf: Vec<T> = vec![T::zero(); n];
    for i in 0..m.nrows() {
        for j in 0..n {
            buf[j] = m[(i, j)];
        }
        buf.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        let mut cum = T::zero();
        let mut tau = T::zero();
        for (k, &v) in buf.iter().enumerate() {
            cum += v;
            let t = (cum - T::one()) / T::from_usize_lossy(k + 1);
            if v - t > T::zero() {
                tau = t;
            }
        }
        for j in 0..n {
            m[(i, j)] = (m[(i, j)] - tau).max(T::zero());
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralEstimate<T> {
    /// Power-iteration estimate of the spectral radius.
    pub rho: T,
    /// Collatz–Wielandt upper bound `max_i (Bv)_i / v_i`; rigorous for
    /// entrywise nonnegative `B`.
    pub upper_bound: T,
    pub iterations: usize,
    pub converged: bool,
}

/// Spectral radius of an (entrywise nonnegative) matrix by power iteration
/// on the shift `B + I`, which keeps imprimitive (periodic) chains from
/// oscillating.
pub fn spectral_radius<T: Real>(b: &DMatrix<T>, tol: T, max_iter: usize) -> SpectralEstimate<T> {
    let n = b.nrows();
    if n == 0 {
        return SpectralEstimate {
            rho: T::zero(),
            upper_bound: T::zero(),
            iterations: 0,
            converged: true,
        };
    }
    let mut v = DVector::from_element(n, T::one() / T::from_usize_lossy(n));
    let mut prev = T::zero();
    let mut est = T::zero();
    let mut converged = false;
    let mut iterations = max_iter;
    let mut upper = T::max_value().unwrap_or_else(|| T::lit(f64::MAX));
    for it in 0..max_iter {
        let bv = b * &v;
        let w = &bv + &v;
        let norm = w.iter().fold(T::zero(), |a, &x| a + x.abs());
        if norm == T::zero() {
            est = T::one();
            converged = true;
            iterations = it;
            break;
        }
        est = norm / v.iter().fold(T::zero(), |a, &x| a + x.abs());
        let cw = bv
            .iter()
            .zip(v.iter())
            .fold(T::zero(), |a, (&num, &den)| if den > T::zero() { a.max(num / den) } else { a });
        if cw < upper {
            upper = cw;
        }
        v = w / norm;
        if it > 0 && (est - prev).abs() <= tol * est.max(T::one()) {
            converged = true;
            iterations = it + 1;
            break;
        }
        prev = est;
    }
    SpectralEstimate {
        rho: (est - T::one()).max(T::zero()),
        upper_bound: upper,
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn pinv_of_rank_one() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (p, rank) = symmetric_pinv(&m, 1e-10);
        assert_eq!(rank, 1);
        assert!((&m * &p * &m - &m).amax() < 1e-12);
    }

    #[test]
    fn simplex_projection() {
        let mut m = DMatrix::<f64>::from_row_slice(2, 3, &[0.2, 0.3, 0.5, 2.0, -1.0, 0.0]);
        project_rows_to_simplex(&mut m);
        assert!((m.row(0).sum() - 1.0).abs() < 1e-15);
        assert_abs_diff_eq!(m[(0, 0)], 0.2, epsilon = 1e-15);
        assert_eq!(m.row(1).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn spectral_radius_cases() {
        let zero = DMatrix::<f64>::zeros(3, 3);
        assert_eq!(spectral_radius(&zero, 1e-10, 1000).rho, 0.0);
        let half = DMatrix::from_element(1, 1, 0.75);
        let e = spectral_radius(&half, 1e-12, 1000);
        assert!(e.converged);
        assert_abs_diff_eq!(e.rho, 0.75, epsilon = 1e-12);
        // period-2 permutation: plain power iteration would oscillate
        let swap = DMatrix::from_row_slice(2, 2, &[0.0, 0.9, 0.9, 0.0]);
        let e = spectral_radius(&swap, 1e-12, 10_000);
        assert!(e.converged);
        assert_abs_diff_eq!(e.rho, 0.9, epsilon = 1e-9);
        assert!(e.upper_bound >= 0.9 - 1e-12);
    }
}
