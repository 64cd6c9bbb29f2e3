//! Controlled benchmark systems, their discretization, and snapshot-pair
//! generation for operator fitting.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Stream id reserved for the uncontrolled data used to place dictionary centers.
pub const UNCONTROLLED_STREAM: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    CubicLogistic,
    Duffing,
    DoubleWell,
    StandardMap,
    /// Data supplied from outside; no update rule is available.
    ExternalData,
}

impl SystemKind {
    pub fn name(self) -> &'static str {
        match self {
            SystemKind::CubicLogistic => "cubic_logistic",
            SystemKind::Duffing => "duffing",
            SystemKind::DoubleWell => "double_well",
            SystemKind::StandardMap => "standard_map",
            SystemKind::ExternalData => "external_data",
        }
    }

    fn required_params(self) -> &'static [&'static str] {
        match self {
            SystemKind::CubicLogistic => &["lambda"],
            SystemKind::Duffing => &["damping"],
            SystemKind::DoubleWell => &["a", "damping"],
            SystemKind::StandardMap => &["k"],
            SystemKind::ExternalData => &[],
        }
    }

    fn state_dim(self) -> Option<usize> {
        match self {
            SystemKind::CubicLogistic => Some(1),
            SystemKind::Duffing | SystemKind::DoubleWell | SystemKind::StandardMap => Some(2),
            SystemKind::ExternalData => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeKind {
    DiscreteMap,
    ContinuousFlow,
}

/// Axis-aligned box `[lower, upper]` in state space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateBox<T> {
    pub lower: Vec<T>,
    pub upper: Vec<T>,
}

impl<T: Real> StateBox<T> {
    pub fn new(lower: Vec<T>, upper: Vec<T>) -> Self {
        StateBox { lower, upper }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &DVector<T>) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&v, (&lo, &hi))| v >= lo && v <= hi)
    }

    pub fn volume(&self) -> T {
        self.lower
            .iter()
            .zip(&self.upper)
            .fold(T::one(), |acc, (&lo, &hi)| acc * (hi - lo))
    }

    /// Maps a point of the unit cube onto the box.
    pub fn from_unit(&self, unit: &[f64]) -> DVector<T> {
        DVector::from_iterator(
            self.dim(),
            unit.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .map(|(&r, (&lo, &hi))| lo + (hi - lo) * T::lit(r)),
        )
    }

    fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() || self.lower.is_empty() {
            return Err(Error::Config("state domain bounds must be nonempty and of equal length".into()));
        }
        for (i, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(lo < hi) {
                return Err(Error::Config(format!("state domain axis {i}: lower {lo} is not below upper {hi}")));
            }
        }
        Ok(())
    }
}

/// A controlled system `x⁺ = T(x, u)` together with its state domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec<T> {
    pub kind: SystemKind,
    pub params: BTreeMap<String, T>,
    pub state_dim: usize,
    pub domain: StateBox<T>,
    pub time_kind: TimeKind,
    /// Sampling period (continuous flows only).
    pub dt: T,
    /// RK4 sub-intervals per sampling period (continuous flows only).
    pub substeps: usize,
}

impl<T: Real> SystemSpec<T> {
    pub fn cubic_logistic(lambda: T) -> Self {
        SystemSpec {
            kind: SystemKind::CubicLogistic,
            params: BTreeMap::from([("lambda".to_string(), lambda)]),
            state_dim: 1,
            domain: StateBox::new(vec![T::lit(-1.6)], vec![T::lit(1.6)]),
            time_kind: TimeKind::DiscreteMap,
            dt: T::one(),
            substeps: 1,
        }
    }

    pub fn duffing(damping: T) -> Self {
        SystemSpec {
            kind: SystemKind::Duffing,
            params: BTreeMap::from([("damping".to_string(), damping)]),
            state_dim: 2,
            domain: StateBox::new(vec![T::lit(-2.0); 2], vec![T::lit(2.0); 2]),
            time_kind: TimeKind::ContinuousFlow,
            dt: T::lit(0.1),
            substeps: 10,
        }
    }

    pub fn double_well(a: T, damping: T) -> Self {
        SystemSpec {
            kind: SystemKind::DoubleWell,
            params: BTreeMap::from([("a".to_string(), a), ("damping".to_string(), damping)]),
            state_dim: 2,
            domain: StateBox::new(vec![T::lit(-2.0); 2], vec![T::lit(2.0); 2]),
            time_kind: TimeKind::ContinuousFlow,
            dt: T::lit(0.1),
            substeps: 10,
        }
    }

    pub fn standard_map(k: T) -> Self {
        SystemSpec {
            kind: SystemKind::StandardMap,
            params: BTreeMap::from([("k".to_string(), k)]),
            state_dim: 2,
            domain: StateBox::new(vec![T::zero(); 2], vec![T::one(); 2]),
            time_kind: TimeKind::DiscreteMap,
            dt: T::one(),
            substeps: 1,
        }
    }

    pub fn param(&self, name: &str) -> Result<T> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("{} requires parameter `{name}`", self.kind.name())))
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        if self.domain.dim() != self.state_dim {
            return Err(Error::Config(format!(
                "state domain has dimension {} but state_dim is {}",
                self.domain.dim(),
                self.state_dim
            )));
        }
        if let Some(d) = self.kind.state_dim() {
            if d != self.state_dim {
                return Err(Error::Config(format!("{} has state dimension {d}", self.kind.name())));
            }
        }
        for p in self.kind.required_params() {
            self.param(p)?;
        }
        if self.time_kind == TimeKind::ContinuousFlow {
            if !(self.dt > T::zero()) {
                return Err(Error::Config("dt must be positive for continuous flows".into()));
            }
            if self.substeps == 0 {
                return Err(Error::Config("substeps must be at least 1".into()));
            }
        }
        Ok(())
    }

    /// One sampling period of the system under zero-order-hold control `u`.
    pub fn advance(&self, x: &DVector<T>, u: &DVector<T>) -> Result<DVector<T>> {
        match self.time_kind {
            TimeKind::DiscreteMap => step_map(self, x, u),
            TimeKind::ContinuousFlow => integrate_flow(self, x, u, self.dt, self.substeps),
        }
    }
}

fn check_dims<T: Real>(spec: &SystemSpec<T>, x: &DVector<T>, u: &DVector<T>) -> Result<()> {
    if x.len() != spec.state_dim {
        return Err(Error::DimensionMismatch {
            expected: spec.state_dim,
            got: x.len(),
        });
    }
    if u.len() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: u.len() });
    }
    Ok(())
}

/// `rem_euclid` that never returns 1 through rounding.
fn wrap_unit<T: Real>(v: T) -> T {
    let one = T::one();
    let mut r = v - v.floor();
    if r >= one {
        r -= one;
    }
    if r < T::zero() {
        r = T::zero();
    }
    r
}

/// One step of a discrete-time benchmark map.
pub fn step_map<T: Real>(spec: &SystemSpec<T>, x: &DVector<T>, u: &DVector<T>) -> Result<DVector<T>> {
    if spec.time_kind != TimeKind::DiscreteMap {
        return Err(Error::UnknownSystemKind(format!("{} is not a discrete map", spec.kind.name())));
    }
    check_dims(spec, x, u)?;
    let u = u[0];
    let next = match spec.kind {
        SystemKind::CubicLogistic => {
            let lambda = spec.param("lambda")?;
            let v = x[0];
            DVector::from_element(1, lambda * v - v * v * v + u)
        }
        SystemKind::StandardMap => {
            let k = spec.param("k")?;
            let kick = k * u * (T::two_pi() * x[0]).sin();
            let y = x[1] + kick;
            DVector::from_vec(vec![wrap_unit(x[0] + x[1] + kick), y])
        }
        other => return Err(Error::UnknownSystemKind(other.name().into())),
    };
    if next.iter().all(|v| v.is_finite_value()) {
        Ok(next)
    } else {
        Err(Error::NonFiniteState)
    }
}

fn vector_field<T: Real>(spec: &SystemSpec<T>, x: &DVector<T>, u: T) -> Result<DVector<T>> {
    let (x1, x2) = (x[0], x[1]);
    let accel = match spec.kind {
        SystemKind::Duffing => {
            let c = spec.param("damping")?;
            (x1 - x1 * x1 * x1) - c * x2 + u
        }
        SystemKind::DoubleWell => {
            let a = spec.param("a")?;
            let c = spec.param("damping")?;
            -x1 * x1 * x1 + a * x1 * x1 + x1 - a - c * x2 + u
        }
        other => return Err(Error::UnknownSystemKind(other.name().into())),
    };
    Ok(DVector::from_vec(vec![x2, accel]))
}

/// Classical RK4 over `substeps` equal sub-intervals of `[0, dt]` with `u` held.
pub fn integrate_flow<T: Real>(
    spec: &SystemSpec<T>,
    x: &DVector<T>,
    u: &DVector<T>,
    dt: T,
    substeps: usize,
) -> Result<DVector<T>> {
    if spec.time_kind != TimeKind::ContinuousFlow {
        return Err(Error::UnknownSystemKind(format!("{} is not a continuous flow", spec.kind.name())));
    }
    check_dims(spec, x, u)?;
    if !(dt > T::zero()) || substeps == 0 {
        return Err(Error::Config("integrate_flow needs dt > 0 and substeps >= 1".into()));
    }
    let u = u[0];
    let h = dt / T::from_usize_lossy(substeps);
    let half = h / T::lit(2.0);
    let sixth = h / T::lit(6.0);
    let two = T::lit(2.0);
    let mut state = x.clone();
    for _ in 0..substeps {
        let k1 = vector_field(spec, &state, u)?;
        let k2 = vector_field(spec, &(&state + &k1 * half), u)?;
        let k3 = vector_field(spec, &(&state + &k2 * half), u)?;
        let k4 = vector_field(spec, &(&state + &k3 * h), u)?;
        state += (k1 + k2 * two + k3 * two + k4) * sixth;
        if !state.iter().all(|v| v.is_finite_value()) {
            return Err(Error::NonFiniteState);
        }
    }
    Ok(state)
}

/// Quantized control set `u^1 < … < u^M` (lexicographic order).
#[derive(Clone, Debug, PartialEq)]
pub struct ControlGrid<T> {
    pub values: Vec<DVector<T>>,
}

impl<T: Real> ControlGrid<T> {
    pub fn new(values: Vec<DVector<T>>) -> Result<Self> {
        let grid = ControlGrid { values };
        grid.validate()?;
        Ok(grid)
    }

    /// Scalar grid `lo:step:hi`, MATLAB-style inclusive.
    pub fn scalar_range(lo: T, step: T, hi: T) -> Result<Self> {
        if !(step > T::zero()) || hi < lo {
            return Err(Error::Config(format!("invalid control range {lo}:{step}:{hi}")));
        }
        let count = ((hi - lo) / step + T::lit(1e-9)).floor().as_f64() as usize + 1;
        let snap = step * T::lit(1e-9);
        let values = (0..count)
            .map(|i| {
                let mut v = lo + step * T::from_usize_lossy(i);
                if v.abs() < snap {
                    v = T::zero();
                }
                DVector::from_element(1, v)
            })
            .collect();
        Self::new(values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, |v| v.len())
    }

    /// Index of the control closest to zero (the attractor action).
    pub fn zero_action(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if v.norm() < self.values[best].norm() {
                best = i;
            }
        }
        best
    }

    /// Index of the grid value nearest to `u` (first on ties).
    pub fn nearest(&self, u: &DVector<T>) -> usize {
        let mut best = 0;
        let mut best_d = (&self.values[0] - u).norm_squared();
        for (i, v) in self.values.iter().enumerate().skip(1) {
            let d = (v - u).norm_squared();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.values.is_empty() || d == 0 {
            return Err(Error::Config("control grid must be nonempty".into()));
        }
        for w in self.values.windows(2) {
            if w[1].len() != d || w[0].len() != d {
                return Err(Error::Config("control grid values differ in dimension".into()));
            }
            let ordering = w[0]
                .iter()
                .zip(w[1].iter())
                .find_map(|(a, b)| a.partial_cmp(b).filter(|o| o.is_ne()));
            if ordering != Some(std::cmp::Ordering::Less) {
                return Err(Error::Config("control grid must be strictly increasing without duplicates".into()));
            }
        }
        Ok(())
    }
}

/// Snapshot pairs `(x_m, y_m)` recorded under one constant control.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset<T> {
    pub action_index: usize,
    pub pairs: Vec<(DVector<T>, DVector<T>)>,
    pub source_seed: u64,
    /// Pairs whose image left the state domain.
    pub dropped: usize,
}

impl<T: Real> TrajectoryDataset<T> {
    pub fn count(&self) -> usize {
        self.pairs.len()
    }

    pub fn dim(&self) -> usize {
        self.pairs.first().map_or(0, |(x, _)| x.len())
    }
}

fn rollout_pairs<T: Real>(
    spec: &SystemSpec<T>,
    u: &DVector<T>,
    n_traj: usize,
    traj_len: usize,
    seed: u64,
    stream: u64,
) -> Result<(Vec<(DVector<T>, DVector<T>)>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let q = spec.state_dim;
    let mut pairs = Vec::with_capacity(n_traj * traj_len);
    let mut dropped = 0;
    let mut unit = vec![0.0f64; q];
    for _ in 0..n_traj {
        for r in unit.iter_mut() {
            *r = rng.random::<f64>();
        }
        let mut x = spec.domain.from_unit(&unit);
        for step in 0..traj_len {
            let y = match spec.advance(&x, u) {
                Ok(y) if spec.domain.contains(&y) => y,
                Ok(_) | Err(Error::NonFiniteState) => {
                    dropped += traj_len - step;
                    break;
                }
                Err(e) => return Err(e),
            };
            pairs.push((x, y.clone()));
            x = y;
        }
    }
    Ok((pairs, dropped))
}

/// Per-action snapshot datasets. Action `a` draws its initial conditions from
/// ChaCha stream `a` of `seed`, so results do not depend on scheduling.
pub fn generate_dataset<T: Real>(
    spec: &SystemSpec<T>,
    grid: &ControlGrid<T>,
    n_traj: usize,
    traj_len: usize,
    seed: u64,
) -> Result<Vec<TrajectoryDataset<T>>> {
    spec.validate()?;
    grid.validate()?;
    if n_traj == 0 || traj_len == 0 {
        return Err(Error::Config("n_traj and traj_len must be at least 1".into()));
    }
    grid.values
        .iter()
        .enumerate()
        .map(|(a, u)| {
            let (pairs, dropped) = rollout_pairs(spec, u, n_traj, traj_len, seed, a as u64)?;
            if pairs.is_empty() {
                return Err(Error::EmptyDataset);
            }
            Ok(TrajectoryDataset {
                action_index: a,
                pairs,
                source_seed: seed,
                dropped,
            })
        })
        .collect()
}

/// Uncontrolled (`u = 0`) data used to place dictionary centers.
pub fn generate_uncontrolled<T: Real>(
    spec: &SystemSpec<T>,
    n_traj: usize,
    traj_len: usize,
    seed: u64,
) -> Result<TrajectoryDataset<T>> {
    spec.validate()?;
    let u = DVector::zeros(1);
    let (pairs, dropped) = rollout_pairs(spec, &u, n_traj, traj_len, seed, UNCONTROLLED_STREAM)?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(TrajectoryDataset {
        action_index: usize::MAX,
        pairs,
        source_seed: seed,
        dropped,
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
    fn logistic_examples() {
        let s = SystemSpec::cubic_logistic(2.3);
        assert_eq!(step_map(&s, &v(&[0.0]), &v(&[0.0])).unwrap()[0], 0.0);
        assert_abs_diff_eq!(step_map(&s, &v(&[1.0]), &v(&[0.0])).unwrap()[0], 1.3, epsilon = 1e-15);
    }

    #[test]
    fn standard_map_fixed_and_wrapped() {
        let s = SystemSpec::standard_map(0.25);
        assert_eq!(step_map(&s, &v(&[0.25, 0.0]), &v(&[0.0])).unwrap(), v(&[0.25, 0.0]));
        let y = step_map(&s, &v(&[0.9, 0.8]), &v(&[0.5])).unwrap();
        assert!(y[0] >= 0.0 && y[0] < 1.0);
        let expected_y = 0.8 + 0.25 * 0.5 * (2.0 * std::f64::consts::PI * 0.9).sin();
        assert_abs_diff_eq!(y[1], expected_y, epsilon = 1e-15);
        // y is not wrapped
        let y = step_map(&s, &v(&[0.25, 0.99]), &v(&[0.5])).unwrap();
        assert!(y[1] > 1.0);
    }

    #[test]
    fn flow_equilibria_are_exact() {
        let duff = SystemSpec::duffing(0.5);
        let dw = SystemSpec::double_well(0.5, 0.0);
        let zero = v(&[0.0]);
        assert_eq!(integrate_flow(&duff, &v(&[0.0, 0.0]), &zero, 0.1, 10).unwrap(), v(&[0.0, 0.0]));
        for eq in [[0.5, 0.0], [1.0, 0.0], [-1.0, 0.0]] {
            assert_eq!(integrate_flow(&dw, &v(&eq), &zero, 0.1, 10).unwrap(), v(&eq));
        }
    }

    #[test]
    fn flow_matches_fine_reference() {
        let duff = SystemSpec::duffing(0.5);
        let x = v(&[1.0, 0.0]);
        let u = v(&[0.0]);
        let coarse = integrate_flow(&duff, &x, &u, 0.1, 10).unwrap();
        let fine = integrate_flow(&duff, &x, &u, 0.1, 1000).unwrap();
        assert!((coarse - fine).amax() < 1e-6);
    }

    #[test]
    fn map_rejects_flow_and_bad_dims() {
        let duff = SystemSpec::duffing(0.5);
        assert!(matches!(
            step_map(&duff, &v(&[0.0, 0.0]), &v(&[0.0])),
            Err(Error::UnknownSystemKind(_))
        ));
        let s = SystemSpec::cubic_logistic(2.3);
        assert!(matches!(
            step_map(&s, &v(&[0.0, 1.0]), &v(&[0.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let duff = SystemSpec::duffing(0.5);
        let r = integrate_flow(&duff, &v(&[1e80, 0.0]), &v(&[0.0]), 0.1, 10);
        assert!(matches!(r, Err(Error::NonFiniteState)));
    }

    #[test]
    fn grid_ranges() {
        let g = ControlGrid::<f64>::scalar_range(-0.2, 0.02, 0.2).unwrap();
        assert_eq!(g.len(), 21);
        assert_eq!(g.values[10][0], 0.0);
        assert_eq!(g.zero_action(), 10);
        assert_eq!(ControlGrid::<f64>::scalar_range(-4.0, 0.5, 4.0).unwrap().len(), 17);
        assert_eq!(ControlGrid::<f64>::scalar_range(-2.0, 0.2, 2.0).unwrap().len(), 21);
        assert_eq!(ControlGrid::<f64>::scalar_range(-0.5, 0.02, 0.5).unwrap().len(), 51);
        assert!(ControlGrid::new(vec![v(&[1.0]), v(&[1.0])]).is_err());
        assert!(ControlGrid::new(vec![v(&[1.0]), v(&[0.0])]).is_err());
        assert!(ControlGrid::<f64>::new(vec![]).is_err());
    }

    #[test]
    fn single_pair_dataset_and_exact_pairs() {
        let s = SystemSpec::cubic_logistic(2.3);
        let g = ControlGrid::scalar_range(-0.2, 0.02, 0.2).unwrap();
        let ds = generate_dataset(&s, &g, 1, 1, 7).unwrap();
        assert_eq!(ds.len(), 21);
        assert!(ds.iter().all(|d| d.count() == 1));
        let ds = generate_dataset(&s, &g, 20, 10, 7).unwrap();
        for d in &ds {
            let u = g.values[d.action_index][0];
            for (x, y) in &d.pairs {
                assert_eq!(y[0], 2.3 * x[0] - x[0] * x[0] * x[0] + u);
            }
        }
    }

    #[test]
    fn dataset_determinism() {
        let s = SystemSpec::duffing(0.5);
        let g = ControlGrid::scalar_range(-4.0, 0.5, 4.0).unwrap();
        let a = generate_dataset(&s, &g, 10, 5, 11).unwrap();
        let b = generate_dataset(&s, &g, 10, 5, 11).unwrap();
        let c = generate_dataset(&s, &g, 10, 5, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].pairs[0].0, c[0].pairs[0].0);
        // out-of-domain images are dropped, never clipped
        for d in &a {
            assert!(d.pairs.iter().all(|(x, y)| s.domain.contains(x) && s.domain.contains(y)));
        }
    }

    #[test]
    fn config_validation() {
        let mut s = SystemSpec::cubic_logistic(2.3);
        s.params.clear();
        assert!(s.validate().is_err());
        let mut s = SystemSpec::duffing(0.5);
        s.dt = 0.0;
        assert!(s.validate().is_err());
        let mut s = SystemSpec::standard_map(0.25);
        s.domain.upper[0] = 0.0;
        assert!(s.validate().is_err());
    }
}
