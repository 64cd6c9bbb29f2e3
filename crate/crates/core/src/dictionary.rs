//! Gaussian radial-basis dictionary, sample Gram matrices, and the basis
//! overlap matrix.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::systems::{StateBox, TrajectoryDataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMode {
    KMeans,
    UniformGrid,
}

/// Gaussian dictionary `ψ_j(x) = exp(-‖x - c_j‖² / (2σ²))` with a shared width.
#[derive(Clone, Debug, PartialEq)]
pub struct RbfDictionary<T> {
    centers: Vec<DVector<T>>,
    sigma: T,
}

impl<T: Real> RbfDictionary<T> {
    pub fn new(centers: Vec<DVector<T>>, sigma: T) -> Result<Self> {
        if centers.len() < 2 {
            return Err(Error::Config("a dictionary needs at least two centers".into()));
        }
        if !(sigma > T::zero()) || !sigma.is_finite_value() {
            return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
        }
        let q = centers[0].len();
        if q == 0 {
            return Err(Error::Config("centers must have positive dimension".into()));
        }
        for c in &centers {
            if c.len() != q {
                return Err(Error::DimensionMismatch {
                    expected: q,
                    got: c.len(),
                });
            }
        }
        let mut sorted: Vec<&DVector<T>> = centers.iter().collect();
        sorted.sort_by(|a, b| {
            a.iter()
                .zip(b.iter())
                .find_map(|(x, y)| x.partial_cmp(y).filter(|o| o.is_ne()))
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("dictionary centers must be distinct".into()));
        }
        Ok(RbfDictionary { centers, sigma })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn sigma(&self) -> T {
        self.sigma
    }

    pub fn centers(&self) -> &[DVector<T>] {
        &self.centers
    }

    fn check(&self, x: &DVector<T>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn sq_dist(&self, j: usize, x: &DVector<T>) -> T {
        self.centers[j]
            .iter()
            .zip(x.iter())
            .fold(T::zero(), |acc, (&c, &v)| acc + (v - c) * (v - c))
    }

    fn eval_row(&self, x: &DVector<T>, out: &mut [T]) {
        let inv = T::one() / (T::lit(2.0) * self.sigma * self.sigma);
        for (j, o) in out.iter_mut().enumerate() {
            *o = (-self.sq_dist(j, x) * inv).exp();
        }
    }

    /// `Ψ(x) = [ψ_1(x), …, ψ_K(x)]`.
    pub fn eval(&self, x: &DVector<T>) -> Result<DVector<T>> {
        self.check(x)?;
        let mut out = DVector::zeros(self.len());
        self.eval_row(x, out.as_mut_slice());
        Ok(out)
    }

    /// Analytic gradient `-(x - c_j)/σ² · ψ_j(x)`.
    pub fn gradient(&self, j: usize, x: &DVector<T>) -> Result<DVector<T>> {
        self.check(x)?;
        let s2 = self.sigma * self.sigma;
        let psi = (-self.sq_dist(j, x) / (T::lit(2.0) * s2)).exp();
        Ok((x - &self.centers[j]) * (-psi / s2))
    }

    /// `ψ_j(x) / Σ_i ψ_i(x)`, computed relative to the nearest center so it
    /// stays finite when every `ψ_i(x)` underflows.
    pub fn normalized_weights(&self, x: &DVector<T>) -> Result<DVector<T>> {
        self.check(x)?;
        let d: Vec<T> = (0..self.len()).map(|j| self.sq_dist(j, x)).collect();
        let dmin = d.iter().copied().fold(d[0], |a, b| if b < a { b } else { a });
        let inv = T::one() / (T::lit(2.0) * self.sigma * self.sigma);
        let mut w = DVector::from_iterator(self.len(), d.iter().map(|&di| (-(di - dmin) * inv).exp()));
        let total = w.sum();
        w /= total;
        Ok(w)
    }

    /// Index of the largest `ψ_j(x)` (nearest center; first on ties).
    pub fn nearest_center(&self, x: &DVector<T>) -> Result<usize> {
        self.check(x)?;
        let mut best = 0;
        let mut best_d = self.sq_dist(0, x);
        for j in 1..self.len() {
            let d = self.sq_dist(j, x);
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        Ok(best)
    }

    /// Row-per-sample design matrix `[Ψ(x_1)ᵀ; …; Ψ(x_L)ᵀ]`.
    pub fn design_matrix<'a, I>(&self, points: I, rows: usize) -> DMatrix<T>
    where
        I: IntoIterator<Item = &'a DVector<T>>,
    {
        let k = self.len();
        let mut phi = DMatrix::zeros(rows, k);
        let mut row = vec![T::zero(); k];
        for (m, x) in points.into_iter().enumerate() {
            self.eval_row(x, &mut row);
            for (j, &v) in row.iter().enumerate() {
                phi[(m, j)] = v;
            }
        }
        phi
    }
}

/// Lloyd's k-means with k-means++ seeding. Empty clusters are re-seeded at
/// the point farthest from its current center.
pub fn kmeans<T: Real>(points: &[DVector<T>], k: usize, seed: u64, max_iter: usize) -> Result<Vec<DVector<T>>> {
    let n = points.len();
    if k == 0 || n < k {
        return Err(Error::TooFewPoints { k, n });
    }
    let q = points[0].len();
    if let Some(bad) = points.iter().find(|p| p.len() != q) {
        return Err(Error::DimensionMismatch {
            expected: q,
            got: bad.len(),
        });
    }
    let sq = |a: &DVector<T>, b: &DVector<T>| -> T {
        a.iter().zip(b.iter()).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<DVector<T>> = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq(p, &centers[0]).as_f64()).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].clone();
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(sq(p, &c).as_f64());
        }
        centers.push(c);
    }

    let mut assign = vec![0usize; n];
    let mut dist = vec![T::zero(); n];
    let tol = T::lit(1e-9);
    for _ in 0..max_iter {
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = sq(p, &centers[0]);
            for (j, c) in centers.iter().enumerate().skip(1) {
                let d = sq(p, c);
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            assign[i] = best;
            dist[i] = best_d;
        }
        let mut sums = vec![DVector::<T>::zeros(q); k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            sums[a] += p;
            counts[a] += 1;
        }
        let mut moved = T::zero();
        for j in 0..k {
            let next = if counts[j] > 0 {
                &sums[j] / T::from_usize_lossy(counts[j])
            } else {
                let far = (0..n)
                    .fold(0, |best, i| if dist[i] > dist[best] { i } else { best });
                dist[far] = T::zero();
                points[far].clone()
            };
            let shift = sq(&next, &centers[j]).sqrt();
            if shift > moved {
                moved = shift;
            }
            centers[j] = next;
        }
        if moved < tol {
            break;
        }
    }
    Ok(centers)
}

/// Within-cluster sum of squares of `points` against their nearest center.
pub fn within_cluster_ss<T: Real>(points: &[DVector<T>], centers: &[DVector<T>]) -> T {
    points
        .iter()
        .map(|p| {
            centers
                .iter()
                .map(|c| (p - c).norm_squared())
                .fold(None, |m: Option<T>, d| Some(m.map_or(d, |m| if d < m { d } else { m })))
                .unwrap_or_else(T::zero)
        })
        .fold(T::zero(), |a, b| a + b)
}

/// Evenly spaced centers over a box (1-D or a near-square 2-D lattice).
pub fn uniform_centers<T: Real>(domain: &StateBox<T>, k: usize) -> Result<Vec<DVector<T>>> {
    match domain.dim() {
        1 => {
            let (lo, hi) = (domain.lower[0], domain.upper[0]);
            let step = (hi - lo) / T::from_usize_lossy(k);
            Ok((0..k)
                .map(|i| DVector::from_element(1, lo + step * (T::from_usize_lossy(i) + T::lit(0.5))))
                .collect())
        }
        2 => {
            let mut nx = (k as f64).sqrt().floor() as usize;
            while nx > 1 && k % nx != 0 {
                nx -= 1;
            }
            let ny = k / nx;
            let cell = |lo: T, hi: T, cnt: usize, i: usize| {
                lo + (hi - lo) / T::from_usize_lossy(cnt) * (T::from_usize_lossy(i) + T::lit(0.5))
            };
            let mut out = Vec::with_capacity(k);
            for i in 0..nx {
                for j in 0..ny {
                    out.push(DVector::from_vec(vec![
                        cell(domain.lower[0], domain.upper[0], nx, i),
                        cell(domain.lower[1], domain.upper[1], ny, j),
                    ]));
                }
            }
            Ok(out)
        }
        d => Err(Error::Config(format!("uniform centers are not available in dimension {d}"))),
    }
}

/// `G = (1/L) Σ Ψ(x_m)Ψ(x_m)ᵀ` and `A = (1/L) Σ Ψ(x_m)Ψ(y_m)ᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct GramSet<T> {
    pub g: DMatrix<T>,
    pub a: DMatrix<T>,
    pub sample_count: usize,
}

pub fn gram_matrices<T: Real>(dict: &RbfDictionary<T>, dataset: &TrajectoryDataset<T>) -> Result<GramSet<T>> {
    let l = dataset.count();
    if l == 0 {
        return Err(Error::EmptyDataset);
    }
    if dataset.dim() != dict.dim() {
        return Err(Error::DimensionMismatch {
            expected: dict.dim(),
            got: dataset.dim(),
        });
    }
    let phi_x = dict.design_matrix(dataset.pairs.iter().map(|(x, _)| x), l);
    let phi_y = dict.design_matrix(dataset.pairs.iter().map(|(_, y)| y), l);
    let inv_l = T::one() / T::from_usize_lossy(l);
    let mut g = phi_x.tr_mul(&phi_x) * inv_l;
    let a = phi_x.tr_mul(&phi_y) * inv_l;
    let half = T::lit(0.5);
    for i in 0..g.nrows() {
        for j in (i + 1)..g.ncols() {
            let s = (g[(i, j)] + g[(j, i)]) * half;
            g[(i, j)] = s;
            g[(j, i)] = s;
        }
    }
    Ok(GramSet { g, a, sample_count: l })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMethod {
    ClosedForm,
    MonteCarlo,
}

/// `Λ_ij = ∫ ψ_i ψ_j` plus a diagonal regularization `ε`.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaMatrix<T> {
    pub lambda: DMatrix<T>,
    pub regularization: T,
    pub method: LambdaMethod,
}

impl<T: Real> LambdaMatrix<T> {
    /// The overlap matrix without the diagonal shift.
    pub fn unregularized(&self) -> DMatrix<T> {
        let mut m = self.lambda.clone();
        for i in 0..m.nrows() {
            m[(i, i)] -= self.regularization;
        }
        m
    }
}

/// Relative diagonal shift `ε = REL · trace(Λ)/K`.
pub const LAMBDA_REGULARIZATION_REL: f64 = 1e-10;

/// Builds Λ. `ClosedForm` integrates over all of ℝ^q; `MonteCarlo` averages
/// `ψ_i ψ_j` over uniform samples of `domain` and multiplies by its volume.
pub fn lambda_matrix<T: Real>(
    dict: &RbfDictionary<T>,
    method: LambdaMethod,
    mc_samples: usize,
    seed: u64,
    domain: Option<&StateBox<T>>,
) -> Result<LambdaMatrix<T>> {
    let k = dict.len();
    let q = dict.dim();
    let sigma = dict.sigma();
    let mut lambda = match method {
        LambdaMethod::ClosedForm => {
            let scale = (sigma * T::pi().sqrt()).powi(q as i32);
            let inv = T::one() / (T::lit(4.0) * sigma * sigma);
            DMatrix::from_fn(k, k, |i, j| {
                let d2 = (&dict.centers[i] - &dict.centers[j]).norm_squared();
                scale * (-d2 * inv).exp()
            })
        }
        LambdaMethod::MonteCarlo => {
            let domain = domain.ok_or_else(|| Error::Config("Monte-Carlo overlap needs a state domain".into()))?;
            if domain.dim() != q {
                return Err(Error::DimensionMismatch {
                    expected: q,
                    got: domain.dim(),
                });
            }
            if mc_samples == 0 {
                return Err(Error::Config("mc_samples must be positive".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let chunk = 4096;
            let mut acc = DMatrix::<T>::zeros(k, k);
            let mut unit = vec![0.0; q];
            let mut done = 0;
            while done < mc_samples {
                let rows = chunk.min(mc_samples - done);
                let pts: Vec<DVector<T>> = (0..rows)
                    .map(|_| {
                        for r in unit.iter_mut() {
                            *r = rng.random::<f64>();
                        }
                        domain.from_unit(&unit)
                    })
                    .collect();
                let phi = dict.design_matrix(pts.iter(), rows);
                acc += phi.tr_mul(&phi);
                done += rows;
            }
            let mut m = acc * (domain.volume() / T::from_usize_lossy(mc_samples));
            m = (&m + m.transpose()) * T::lit(0.5);
            m
        }
    };
    let eps = T::lit(LAMBDA_REGULARIZATION_REL) * lambda.trace() / T::from_usize_lossy(k);
    for i in 0..k {
        lambda[(i, i)] += eps;
    }
    Ok(LambdaMatrix {
        lambda,
        regularization: eps,
        method,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn eval_values() {
        let d = RbfDictionary::new(vec![v(&[0.0, 0.0]), v(&[1.0, 1.0])], 0.5).unwrap();
        let psi = d.eval(&v(&[0.0, 0.0])).unwrap();
        assert_eq!(psi[0], 1.0);
        let psi = d.eval(&v(&[0.5, 0.0])).unwrap();
        assert_abs_diff_eq!(psi[0], (-0.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(psi[0], 0.606531, epsilon = 1e-6);
        assert!(d.eval(&v(&[1.0])).is_err());
    }

    #[test]
    fn dictionary_invariants() {
        assert!(RbfDictionary::new(vec![v(&[0.0])], 1.0).is_err());
        assert!(RbfDictionary::new(vec![v(&[0.0]), v(&[1.0])], 0.0).is_err());
        assert!(RbfDictionary::new(vec![v(&[0.0]), v(&[0.0])], 1.0).is_err());
        assert!(RbfDictionary::new(vec![v(&[0.0]), v(&[0.0, 1.0])], 1.0).is_err());
    }

    #[test]
    fn normalized_weights_survive_underflow() {
        let d = RbfDictionary::new(vec![v(&[0.0]), v(&[1.0])], 1e-3).unwrap();
        let w = d.normalized_weights(&v(&[10.0])).unwrap();
        assert!(w.iter().all(|x| x.is_finite()));
        assert_abs_diff_eq!(w[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn kmeans_small_cases() {
        let pts = vec![v(&[0.0, 0.0]), v(&[3.0, 1.0])];
        let mut c = kmeans(&pts, 2, 1, 50).unwrap();
        c.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(c, pts);

        let pts: Vec<_> = (0..10).map(|i| v(&[i as f64, (i * i) as f64])).collect();
        let c = kmeans(&pts, 1, 3, 50).unwrap();
        assert_abs_diff_eq!(c[0][0], 4.5, epsilon = 1e-12);
        assert_abs_diff_eq!(c[0][1], 28.5, epsilon = 1e-12);

        assert!(matches!(kmeans(&pts, 11, 0, 10), Err(Error::TooFewPoints { .. })));
    }

    #[test]
    fn kmeans_is_deterministic() {
        let pts: Vec<_> = (0..200).map(|i| v(&[((i * 37) % 101) as f64 / 101.0])).collect();
        assert_eq!(kmeans(&pts, 7, 42, 100).unwrap(), kmeans(&pts, 7, 42, 100).unwrap());
    }

    #[test]
    fn uniform_centers_layout() {
        let b = StateBox::new(vec![-1.0], vec![1.0]);
        let c = uniform_centers(&b, 4).unwrap();
        assert_eq!(c.iter().map(|x| x[0]).collect::<Vec<_>>(), vec![-0.75, -0.25, 0.25, 0.75]);
        let b = StateBox::new(vec![0.0, 0.0], vec![1.0, 1.0]);
        assert_eq!(uniform_centers(&b, 200).unwrap().len(), 200);
        assert_eq!(uniform_centers(&b, 100).unwrap().len(), 100);
    }

    #[test]
    fn gram_single_pair() {
        // centers far apart so Ψ(x) ≈ (1,0), Ψ(y) ≈ (0,1)
        let d = RbfDictionary::new(vec![v(&[0.0]), v(&[100.0])], 1.0).unwrap();
        let ds = TrajectoryDataset {
            action_index: 0,
            pairs: vec![(v(&[0.0]), v(&[100.0]))],
            source_seed: 0,
            dropped: 0,
        };
        let gs = gram_matrices(&d, &ds).unwrap();
        assert_eq!(gs.g, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        assert_eq!(gs.a, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]));
    }

    #[test]
    fn gram_identity_dynamics_and_psd() {
        let d = RbfDictionary::new((0..6).map(|i| v(&[i as f64 * 0.3])).collect(), 0.4).unwrap();
        let pairs: Vec<_> = (0..100)
            .map(|i| {
                let x = v(&[(i as f64 * 0.6180339887).fract() * 1.5]);
                (x.clone(), x)
            })
            .collect();
        let ds = TrajectoryDataset {
            action_index: 0,
            pairs,
            source_seed: 0,
            dropped: 0,
        };
        let gs = gram_matrices(&d, &ds).unwrap();
        assert!((&gs.g - &gs.a).amax() < 1e-15);
        assert!((&gs.g - gs.g.transpose()).amax() == 0.0);
        let eig = gs.g.clone().symmetric_eigenvalues();
        assert!(eig.iter().all(|&e| e >= -1e-12));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let d = RbfDictionary::new(vec![v(&[0.0]), v(&[1.0])], 1.0).unwrap();
        let ds = TrajectoryDataset::<f64> {
            action_index: 0,
            pairs: vec![],
            source_seed: 0,
            dropped: 0,
        };
        assert!(matches!(gram_matrices(&d, &ds), Err(Error::EmptyDataset)));
    }

    #[test]
    fn closed_form_lambda() {
        let d = RbfDictionary::new(vec![v(&[0.0]), v(&[1e3])], 1.0).unwrap();
        let lam = lambda_matrix(&d, LambdaMethod::ClosedForm, 0, 0, None).unwrap();
        let raw = lam.unregularized();
        assert_abs_diff_eq!(raw[(0, 0)], std::f64::consts::PI.sqrt(), epsilon = 1e-14);
        assert_abs_diff_eq!(raw[(0, 0)], 1.772454, epsilon = 1e-6);
        assert!(raw[(0, 1)] < 1e-300);
        assert_eq!(lam.lambda[(0, 0)], lam.lambda[(1, 1)]);
        assert_abs_diff_eq!(lam.regularization, 1e-10 * 2.0 * raw[(0, 0)] / 2.0, epsilon = 1e-24);
    }

    #[test]
    fn monte_carlo_needs_domain() {
        let d = RbfDictionary::new(vec![v(&[0.0]), v(&[1.0])], 1.0).unwrap();
        assert!(lambda_matrix(&d, LambdaMethod::MonteCarlo, 10, 0, None).is_err());
    }
}
