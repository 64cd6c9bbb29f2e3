//! End-to-end runs: data → dictionary → operators → LP → policy →
//! certificate → rollouts, persisted as a bundle directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{preset, PipelineConfig};
use crate::control::{
    attractor_indices, balance_residual, closed_loop_pf, evaluate_cost, extract_policy, feedback, lyapunov_certificate,
    solve_stabilization, LyapunovCertificate, OccupationSolution, OperatorBank, Policy, QuadraticCost,
    StabilizationProblem,
};
use crate::dictionary::{gram_matrices, kmeans, lambda_matrix, uniform_centers, CenterMode, LambdaMatrix, RbfDictionary};
use crate::error::{Error, Result};
use crate::io::{self, DictionaryMeta, OperatorMeta};
use crate::operator::{fit_nsdmd, validate_markov, PfMatrix};
use crate::optim::SolverOptions;
use crate::systems::{generate_dataset, generate_uncontrolled, ControlGrid, SystemSpec, TrajectoryDataset};

/// Environment variable naming the root directory for bundles.
pub const OUTPUT_ROOT_ENV: &str = "PFSTAB_OUTPUT_ROOT";

/// Tolerance used when re-checking operator structure.
pub const MARKOV_CHECK_TOL: f64 = 1e-6;

/// Root for bundles: `$PFSTAB_OUTPUT_ROOT`, else `./runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// File layout of a bundle directory.
#[derive(Clone, Debug)]
pub struct Bundle {
    pub dir: PathBuf,
}

impl Bundle {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Bundle { dir: dir.into() }
    }

    /// `cfg.output_dir`, else `<root>/<name>`.
    pub fn for_config(cfg: &PipelineConfig) -> Self {
        Bundle::new(cfg.output_dir.clone().unwrap_or_else(|| output_root().join(&cfg.name)))
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }
    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }
    pub fn failure(&self) -> PathBuf {
        self.dir.join("failure.json")
    }
    pub fn dataset(&self, a: usize) -> PathBuf {
        self.dir.join("data").join(io::dataset_file_name(a))
    }
    pub fn uncontrolled(&self) -> PathBuf {
        self.dir.join("data").join("data_uncontrolled.csv")
    }
    pub fn dictionary(&self) -> PathBuf {
        self.dir.join("dictionary.csv")
    }
    pub fn dictionary_meta(&self) -> PathBuf {
        self.dir.join("dictionary.json")
    }
    pub fn lambda(&self) -> PathBuf {
        self.dir.join("lambda.csv")
    }
    pub fn operator(&self, a: usize) -> PathBuf {
        self.dir.join("operators").join(io::operator_file_name(a))
    }
    pub fn operator_meta(&self, a: usize) -> PathBuf {
        self.dir.join("operators").join(io::operator_meta_file_name(a))
    }
    pub fn theta(&self) -> PathBuf {
        self.dir.join("theta.csv")
    }
    pub fn solution(&self) -> PathBuf {
        self.dir.join("solution.json")
    }
    pub fn policy(&self) -> PathBuf {
        self.dir.join("policy.csv")
    }
    pub fn policy_meta(&self) -> PathBuf {
        self.dir.join("policy.json")
    }
    pub fn certificate(&self) -> PathBuf {
        self.dir.join("certificate.json")
    }
    pub fn mu_bar(&self) -> PathBuf {
        self.dir.join("mu_bar.csv")
    }
    pub fn rollouts(&self, mode: RolloutMode) -> PathBuf {
        self.dir.join(format!("rollouts_{}.csv", mode.tag()))
    }
    pub fn rollout_summary(&self, mode: RolloutMode) -> PathBuf {
        self.dir.join(format!("rollout_summary_{}.csv", mode.tag()))
    }

    /// Errors with the full list of `paths` that do not exist.
    pub fn require(&self, paths: &[PathBuf]) -> Result<()> {
        let missing: Vec<PathBuf> = paths.iter().filter(|p| !p.exists()).cloned().collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingArtifacts(missing))
        }
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: name,
            source: Box::new(e),
        },
    })
}

/// Loads the configuration stored in a bundle.
pub fn load_bundle_config(bundle: &Bundle) -> Result<PipelineConfig> {
    bundle.require(&[bundle.config()])?;
    let mut cfg = PipelineConfig::load(&bundle.config())?;
    cfg.output_dir = Some(bundle.dir.clone());
    Ok(cfg)
}

pub fn write_config(cfg: &PipelineConfig, bundle: &Bundle) -> Result<()> {
    fs::create_dir_all(&bundle.dir).map_err(|e| Error::io(&bundle.dir, e))?;
    let mut c = cfg.clone();
    c.output_dir = None;
    let text = c.to_toml()?;
    fs::write(bundle.config(), text).map_err(|e| Error::io(bundle.config(), e))
}

/// Index of an exactly-zero control, if the grid has one.
fn exact_zero_action(grid: &ControlGrid<f64>) -> Option<usize> {
    grid.values.iter().position(|v| v.iter().all(|&x| x == 0.0))
}

pub struct GeneratedData {
    pub datasets: Vec<TrajectoryDataset<f64>>,
    /// Uncontrolled data for the dictionary, when the grid lacks `u = 0`.
    pub uncontrolled: Option<TrajectoryDataset<f64>>,
}

impl GeneratedData {
    /// States used to place centers (the `u = 0` trajectories).
    pub fn center_points(&self, grid: &ControlGrid<f64>) -> Vec<DVector<f64>> {
        let src = match (&self.uncontrolled, exact_zero_action(grid)) {
            (Some(u), _) => u,
            (None, Some(a)) => &self.datasets[a],
            (None, None) => &self.datasets[grid.zero_action()],
        };
        src.pairs.iter().map(|(x, _)| x.clone()).collect()
    }
}

pub fn stage_generate(cfg: &PipelineConfig, bundle: &Bundle) -> Result<GeneratedData> {
    let grid = cfg.grid.build()?;
    let d = &cfg.data;
    let datasets = generate_dataset(&cfg.system, &grid, d.n_traj, d.traj_len, d.seed)?;
    for ds in &datasets {
        if ds.dropped > 0 {
            info!("action {}: {} pairs left the domain", ds.action_index, ds.dropped);
        }
        io::write_dataset(ds, &bundle.dataset(ds.action_index))?;
    }
    let uncontrolled = if exact_zero_action(&grid).is_none() {
        let mut u = generate_uncontrolled(&cfg.system, d.n_traj, d.traj_len, d.seed)?;
        u.action_index = grid.len();
        io::write_dataset(&u, &bundle.uncontrolled())?;
        Some(u)
    } else {
        None
    };
    Ok(GeneratedData { datasets, uncontrolled })
}

pub fn load_generated(cfg: &PipelineConfig, bundle: &Bundle) -> Result<GeneratedData> {
    let grid = cfg.grid.build()?;
    let mut paths: Vec<PathBuf> = (0..grid.len()).map(|a| bundle.dataset(a)).collect();
    let zero = exact_zero_action(&grid);
    if zero.is_none() {
        paths.push(bundle.uncontrolled());
    }
    bundle.require(&paths)?;
    let datasets = (0..grid.len())
        .map(|a| io::read_dataset(&bundle.dataset(a), Some(a)))
        .collect::<Result<Vec<_>>>()?;
    let uncontrolled = if zero.is_none() {
        Some(io::read_dataset(&bundle.uncontrolled(), Some(grid.len()))?)
    } else {
        None
    };
    Ok(GeneratedData { datasets, uncontrolled })
}

pub fn stage_dictionary(
    cfg: &PipelineConfig,
    bundle: &Bundle,
    data: &GeneratedData,
) -> Result<(RbfDictionary<f64>, LambdaMatrix<f64>)> {
    let grid = cfg.grid.build()?;
    let dc = &cfg.dictionary;
    let centers = match dc.center_mode {
        CenterMode::KMeans => kmeans(&data.center_points(&grid), dc.k_centers, cfg.data.seed, dc.kmeans_max_iter)?,
        CenterMode::UniformGrid => uniform_centers(&cfg.system.domain, dc.k_centers)?,
    };
    let dict = RbfDictionary::new(centers, dc.sigma)?;
    let lam = lambda_matrix(&dict, dc.lambda_method, dc.mc_samples, cfg.data.seed, Some(&cfg.system.domain))?;
    let meta = DictionaryMeta {
        sigma: dc.sigma,
        q: dict.dim(),
        k: dict.len(),
        epsilon: lam.regularization,
        method: lam.method,
        center_mode: dc.center_mode,
    };
    io::write_dictionary(&dict, &meta, &bundle.dictionary(), &bundle.dictionary_meta())?;
    io::write_matrix(&lam.lambda, &bundle.lambda())?;
    Ok((dict, lam))
}

pub fn load_dictionary(bundle: &Bundle) -> Result<RbfDictionary<f64>> {
    bundle.require(&[bundle.dictionary(), bundle.dictionary_meta()])?;
    Ok(io::read_dictionary(&bundle.dictionary(), &bundle.dictionary_meta())?.0)
}

pub fn stage_fit(
    cfg: &PipelineConfig,
    bundle: &Bundle,
    dict: &RbfDictionary<f64>,
    lam: &LambdaMatrix<f64>,
    data: &GeneratedData,
) -> Result<(OperatorBank<f64>, Vec<OperatorMeta>)> {
    let grid = cfg.grid.build()?;
    let nsdmd = cfg.nsdmd.to_config();
    let hash = cfg.hash();
    let fits = data
        .datasets
        .par_iter()
        .map(|ds| {
            let grams = gram_matrices(dict, ds)?;
            let fit = fit_nsdmd(&grams, lam, &nsdmd)?;
            Ok((ds.action_index, fit))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut p_list = Vec::with_capacity(fits.len());
    let mut metas = Vec::with_capacity(fits.len());
    for (a, fit) in fits {
        let meta = OperatorMeta {
            action_index: a,
            control_value: grid.values[a].iter().copied().collect(),
            residual: fit.koopman.fit_residual,
            edmd_residual: fit.diagnostics.edmd_residual,
            constraint_violation: fit.koopman.constraint_violation,
            projection_deviation: fit.diagnostics.projection_deviation,
            solver_status: fit.diagnostics.status,
            iterations: fit.diagnostics.iterations,
            config_hash: hash.clone(),
        };
        io::write_matrix(&fit.pf.p_mat, &bundle.operator(a))?;
        io::write_json(&meta, &bundle.operator_meta(a))?;
        info!(
            "action {a}: residual {:.3e} (EDMD {:.3e}), raw violation {:.2e}",
            meta.residual, meta.edmd_residual, meta.constraint_violation
        );
        p_list.push(fit.pf);
        metas.push(meta);
    }
    Ok((OperatorBank::new(grid, p_list, "dictionary.csv")?, metas))
}

pub fn load_bank(cfg: &PipelineConfig, bundle: &Bundle) -> Result<OperatorBank<f64>> {
    let grid = cfg.grid.build()?;
    let paths: Vec<PathBuf> = (0..grid.len()).map(|a| bundle.operator(a)).collect();
    bundle.require(&paths)?;
    let p_list = paths
        .iter()
        .map(|p| io::read_matrix(p).map(PfMatrix::new))
        .collect::<Result<Vec<_>>>()?;
    OperatorBank::new(grid, p_list, "dictionary.csv")
}

pub fn stabilization_problem(cfg: &PipelineConfig, dict: &RbfDictionary<f64>, gamma: f64) -> Result<StabilizationProblem<f64>> {
    let grid = cfg.grid.build()?;
    let s = &cfg.stabilization;
    let cost = QuadraticCost {
        targets: cfg.targets(),
        state_weight: s.state_weight,
        control_weight: s.control_weight,
    };
    let attractor = attractor_indices(dict.centers(), &cfg.targets(), cfg.r_att());
    let mut prob = StabilizationProblem::new(attractor, gamma, cost.matrix(dict.centers(), &grid))?;
    prob.normalize = s.normalize;
    Ok(prob)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolutionRecord {
    pub gamma: f64,
    pub gammas_tried: Vec<f64>,
    pub objective: f64,
    pub recomputed_objective: f64,
    pub balance_residual: f64,
    pub iterations: usize,
    pub attractor_indices: Vec<usize>,
    pub flagged: Vec<usize>,
}

pub struct Synthesis {
    pub problem: StabilizationProblem<f64>,
    pub solution: OccupationSolution<f64>,
    pub policy: Policy<f64>,
    pub record: SolutionRecord,
}

/// Solves the LP at the configured `γ`, falling back to the listed smaller
/// values while it is infeasible.
pub fn stage_synthesize(
    cfg: &PipelineConfig,
    bundle: &Bundle,
    dict: &RbfDictionary<f64>,
    bank: &OperatorBank<f64>,
) -> Result<Synthesis> {
    let s = &cfg.stabilization;
    let mut gammas = vec![s.gamma];
    gammas.extend(s.gamma_fallback.iter().copied().filter(|&g| g < s.gamma));
    let mut tried = Vec::new();
    let mut last_err = None;
    for &gamma in &gammas {
        tried.push(gamma);
        let prob = stabilization_problem(cfg, dict, gamma)?;
        match solve_stabilization(bank, &prob, SolverOptions::default()) {
            Ok(sol) => {
                if tried.len() > 1 {
                    warn!("stabilization LP solved only after lowering gamma to {gamma}");
                }
                let policy = extract_policy(&sol, bank, &prob, s.feedback_mode, s.grid_snap);
                let record = SolutionRecord {
                    gamma,
                    gammas_tried: tried.clone(),
                    objective: sol.objective,
                    recomputed_objective: evaluate_cost(&sol, &prob),
                    balance_residual: balance_residual(bank, &prob, &sol)?,
                    iterations: sol.status.iterations,
                    attractor_indices: prob.attractor_indices.clone(),
                    flagged: policy.flagged.clone(),
                };
                io::write_matrix(&sol.theta, &bundle.theta())?;
                io::write_json(&record, &bundle.solution())?;
                io::write_policy(&policy, dict, &bundle.policy(), &bundle.policy_meta())?;
                return Ok(Synthesis {
                    problem: prob,
                    solution: sol,
                    policy,
                    record,
                });
            }
            Err(e @ Error::Infeasible(_)) => {
                warn!("{e}");
                last_err = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Infeasible("no gamma to try".into())))
}

pub fn load_policy(bundle: &Bundle) -> Result<Policy<f64>> {
    bundle.require(&[bundle.policy(), bundle.policy_meta()])?;
    Ok(io::read_policy(&bundle.policy(), &bundle.policy_meta())?.0)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OperatorCheck {
    pub action_index: usize,
    pub max_negative_entry: f64,
    pub max_column_sum_deviation: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CertificateReport {
    #[serde(flatten)]
    pub certificate: LyapunovCertificate<f64>,
    pub attractor_indices: Vec<usize>,
    pub balance_residual: f64,
    pub operators_pass: bool,
    pub operator_checks: Vec<OperatorCheck>,
}

impl CertificateReport {
    pub fn pass(&self) -> bool {
        self.certificate.pass && self.operators_pass
    }
}

/// Re-checks every operator, the LP balance and the closed-loop certificate
/// of a bundle; writes `certificate.json` and `mu_bar.csv`.
pub fn verify(bundle: &Bundle) -> Result<CertificateReport> {
    let cfg = load_bundle_config(bundle)?;
    let grid = cfg.grid.build()?;
    let mut needed = vec![
        bundle.dictionary(),
        bundle.dictionary_meta(),
        bundle.theta(),
        bundle.solution(),
        bundle.policy(),
        bundle.policy_meta(),
    ];
    needed.extend((0..grid.len()).map(|a| bundle.operator(a)));
    bundle.require(&needed)?;
    let dict = load_dictionary(bundle)?;
    let p_list = (0..grid.len())
        .map(|a| io::read_matrix(&bundle.operator(a)).map(PfMatrix::new))
        .collect::<Result<Vec<_>>>()?;
    let checks: Vec<OperatorCheck> = p_list
        .iter()
        .enumerate()
        .map(|(a, p)| {
            let r = validate_markov(p, MARKOV_CHECK_TOL);
            OperatorCheck {
                action_index: a,
                max_negative_entry: r.max_negative_entry,
                max_column_sum_deviation: r.max_column_sum_deviation,
                pass: r.pass,
            }
        })
        .collect();
    let bad: Vec<usize> = checks.iter().filter(|c| !c.pass).map(|c| c.action_index).collect();
    let bank = OperatorBank::new(grid, p_list, "dictionary.csv")?;
    let record: SolutionRecord = io::read_json(&bundle.solution())?;
    let prob = stabilization_problem(&cfg, &dict, record.gamma)?;
    let theta = io::read_matrix(&bundle.theta())?;
    if theta.shape() != (prob.m_vec.len(), bank.n_actions()) {
        return Err(Error::Verification(format!(
            "theta has shape {:?}, expected {:?}",
            theta.shape(),
            (prob.m_vec.len(), bank.n_actions())
        )));
    }
    let m_used = if prob.normalize {
        // the slack is recovered from the balance equation itself
        let mut m = DVector::zeros(prob.m_vec.len());
        for a in 0..bank.n_actions() {
            let p1 = crate::control::restrict_operator(&bank.p_list[a], &prob.attractor_indices)?;
            let th = theta.column(a).into_owned();
            m += &th - p1 * &th * prob.gamma;
        }
        m
    } else {
        prob.m_vec.clone()
    };
    let sol = OccupationSolution {
        theta,
        objective: record.objective,
        status: crate::optim::SolveStatus {
            state: crate::optim::SolveState::Optimal,
            objective: record.objective,
            primal_feas: 0.0,
            dual_feas: 0.0,
            gap: 0.0,
            iterations: record.iterations,
        },
        m_used,
    };
    let balance = balance_residual(&bank, &prob, &sol)?;
    let policy = load_policy(bundle)?;
    let p_cl = closed_loop_pf(&bank, &policy)?;
    let certificate = lyapunov_certificate(&p_cl, &prob)?;
    let free = prob.free_indices();
    if !certificate.mu_bar.is_empty() {
        io::write_mu_bar(dict.centers(), &free, &certificate.mu_bar, &bundle.mu_bar())?;
    }
    let report = CertificateReport {
        certificate,
        attractor_indices: prob.attractor_indices.clone(),
        balance_residual: balance,
        operators_pass: bad.is_empty(),
        operator_checks: checks,
    };
    io::write_json(&report, &bundle.certificate())?;
    if !bad.is_empty() {
        return Err(Error::Verification(format!(
            "operators for actions {bad:?} fail the Markov check at {MARKOV_CHECK_TOL:e}"
        )));
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    OpenLoop,
    ClosedLoop,
}

impl RolloutMode {
    fn tag(self) -> &'static str {
        match self {
            RolloutMode::OpenLoop => "open",
            RolloutMode::ClosedLoop => "closed",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutRecord {
    pub mode: RolloutMode,
    pub initial_state: DVector<f64>,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub converged: bool,
    pub steps_to_converge: Option<usize>,
    pub diverged: bool,
}

/// Convergence target: a union of balls around the target points.
#[derive(Clone, Debug)]
pub struct ConvergenceSpec {
    pub targets: Vec<DVector<f64>>,
    pub radius: f64,
    pub dwell: usize,
}

impl ConvergenceSpec {
    pub fn inside(&self, x: &DVector<f64>) -> bool {
        self.targets.iter().any(|t| (x - t).norm() < self.radius)
    }

    /// First step from which the state stays inside for `dwell` consecutive
    /// steps (the window is cut at the end of the rollout).
    pub fn first_entry(&self, states: &[DVector<f64>]) -> Option<usize> {
        let inside: Vec<bool> = states.iter().map(|x| self.inside(x)).collect();
        (0..inside.len()).find(|&t| inside[t..(t + self.dwell).min(inside.len())].iter().all(|&b| b))
    }
}

pub struct Controller<'a> {
    pub policy: &'a Policy<f64>,
    pub dict: &'a RbfDictionary<f64>,
}

pub fn simulate(
    spec: &SystemSpec<f64>,
    controller: Option<&Controller<'_>>,
    initial_states: &[DVector<f64>],
    horizon: usize,
    conv: &ConvergenceSpec,
) -> Result<Vec<RolloutRecord>> {
    let mode = if controller.is_some() {
        RolloutMode::ClosedLoop
    } else {
        RolloutMode::OpenLoop
    };
    initial_states
        .iter()
        .map(|x0| {
            if x0.len() != spec.state_dim {
                return Err(Error::DimensionMismatch {
                    expected: spec.state_dim,
                    got: x0.len(),
                });
            }
            let mut states = vec![x0.clone()];
            let mut controls = Vec::with_capacity(horizon);
            let mut diverged = false;
            for _ in 0..horizon {
                let x = states.last().expect("nonempty");
                let u = match controller {
                    Some(c) => feedback(c.policy, c.dict, x)?,
                    None => DVector::zeros(1),
                };
                match spec.advance(x, &u) {
                    Ok(next) => {
                        controls.push(u);
                        states.push(next);
                    }
                    Err(Error::NonFiniteState) => {
                        diverged = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            let steps = if diverged { None } else { conv.first_entry(&states) };
            Ok(RolloutRecord {
                mode,
                initial_state: x0.clone(),
                states,
                controls,
                converged: steps.is_some(),
                steps_to_converge: steps,
                diverged,
            })
        })
        .collect()
}

/// Configured initial states followed by `n_random` uniform draws.
pub fn initial_states(cfg: &PipelineConfig) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = cfg
        .simulation
        .initial_states
        .iter()
        .map(|x| DVector::from_column_slice(x))
        .collect();
    out.extend(random_states(&cfg.system, cfg.simulation.n_random, cfg.simulation.seed));
    out
}

pub fn random_states(spec: &SystemSpec<f64>, n: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = spec.state_dim;
    (0..n)
        .map(|_| {
            let unit: Vec<f64> = (0..q).map(|_| rng.random::<f64>()).collect();
            spec.domain.from_unit(&unit)
        })
        .collect()
}

pub fn convergence_spec(cfg: &PipelineConfig) -> ConvergenceSpec {
    ConvergenceSpec {
        targets: cfg.targets(),
        radius: cfg.sim_radius(),
        dwell: cfg.simulation.dwell,
    }
}

/// Writes the per-step table (`rollout,step,x..,u..,cost`) and the
/// per-rollout summary (`rollout,x0..,converged,steps_to_converge,diverged`).
pub fn write_rollouts(cfg: &PipelineConfig, bundle: &Bundle, records: &[RolloutRecord]) -> Result<()> {
    let Some(mode) = records.first().map(|r| r.mode) else {
        return Ok(());
    };
    let q = cfg.system.state_dim;
    let cost = QuadraticCost {
        targets: cfg.targets(),
        state_weight: cfg.stabilization.state_weight,
        control_weight: cfg.stabilization.control_weight,
    };
    let mut header = vec!["rollout".to_string(), "step".to_string()];
    header.extend((0..q).map(|i| format!("x{i}")));
    header.push("u0".into());
    header.push("cost".into());
    let mut rows = Vec::new();
    for (r, rec) in records.iter().enumerate() {
        for (t, x) in rec.states.iter().enumerate() {
            let mut row = vec![r as f64, t as f64];
            row.extend(x.iter());
            match rec.controls.get(t) {
                Some(u) => {
                    row.push(u[0]);
                    row.push(cost.eval(x, u));
                }
                None => {
                    row.push(f64::NAN);
                    row.push(cost.eval(x, &DVector::zeros(1)));
                }
            }
            rows.push(row);
        }
    }
    io::write_table(&header, &rows, &bundle.rollouts(mode))?;
    let mut header = vec!["rollout".to_string()];
    header.extend((0..q).map(|i| format!("x{i}")));
    header.extend(["converged", "steps_to_converge", "diverged"].map(String::from));
    let rows: Vec<Vec<f64>> = records
        .iter()
        .enumerate()
        .map(|(r, rec)| {
            let mut row = vec![r as f64];
            row.extend(rec.initial_state.iter());
            row.push(f64::from(u8::from(rec.converged)));
            row.push(rec.steps_to_converge.map_or(-1.0, |s| s as f64));
            row.push(f64::from(u8::from(rec.diverged)));
            row
        })
        .collect();
    io::write_table(&header, &rows, &bundle.rollout_summary(mode))
}

pub fn stage_simulate(
    cfg: &PipelineConfig,
    bundle: &Bundle,
    dict: &RbfDictionary<f64>,
    policy: &Policy<f64>,
) -> Result<(Vec<RolloutRecord>, Vec<RolloutRecord>)> {
    let x0 = initial_states(cfg);
    let conv = convergence_spec(cfg);
    let open = simulate(&cfg.system, None, &x0, cfg.simulation.horizon, &conv)?;
    let controller = Controller { policy, dict };
    let closed = simulate(&cfg.system, Some(&controller), &x0, cfg.simulation.horizon, &conv)?;
    write_rollouts(cfg, bundle, &open)?;
    write_rollouts(cfg, bundle, &closed)?;
    Ok((open, closed))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub config_hash: String,
    pub version: String,
    pub notes: Vec<String>,
    pub stages: Vec<StageTiming>,
    pub gamma_used: Option<f64>,
    pub certificate_pass: Option<bool>,
    pub closed_loop_converged: Option<usize>,
    pub rollouts: Option<usize>,
    pub failed_stage: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FailureRecord {
    pub stage: String,
    pub error: String,
}

pub struct RunOutcome {
    pub bundle: Bundle,
    pub config: PipelineConfig,
    pub dict: RbfDictionary<f64>,
    pub bank: OperatorBank<f64>,
    pub operator_meta: Vec<OperatorMeta>,
    pub synthesis: Synthesis,
    pub report: CertificateReport,
    pub open_loop: Vec<RolloutRecord>,
    pub closed_loop: Vec<RolloutRecord>,
    pub manifest: Manifest,
}

struct Timer {
    stages: Vec<StageTiming>,
}

impl Timer {
    fn run<T>(&mut self, name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        info!("stage {name}");
        let out = stage(name, f());
        self.stages.push(StageTiming {
            stage: name.into(),
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        out
    }
}

/// Runs every stage and writes the bundle. On failure the partial bundle is
/// kept together with `failure.json`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let bundle = Bundle::for_config(cfg);
    write_config(cfg, &bundle)?;
    let _ = fs::remove_file(bundle.failure());
    let mut manifest = Manifest {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        version: env!("CARGO_PKG_VERSION").into(),
        notes: cfg.notes.clone(),
        stages: vec![],
        gamma_used: None,
        certificate_pass: None,
        closed_loop_converged: None,
        rollouts: None,
        failed_stage: None,
    };
    let mut timer = Timer { stages: vec![] };
    let result = run_stages(cfg, &bundle, &mut timer);
    manifest.stages = timer.stages;
    match result {
        Ok(mut out) => {
            manifest.gamma_used = Some(out.synthesis.record.gamma);
            manifest.certificate_pass = Some(out.report.pass());
            manifest.closed_loop_converged = Some(out.closed_loop.iter().filter(|r| r.converged).count());
            manifest.rollouts = Some(out.closed_loop.len());
            io::write_json(&manifest, &bundle.manifest())?;
            out.manifest = manifest;
            Ok(out)
        }
        Err(e) => {
            let stage_name = match &e {
                Error::Stage { stage, .. } => stage.to_string(),
                _ => "setup".to_string(),
            };
            manifest.failed_stage = Some(stage_name.clone());
            io::write_json(&manifest, &bundle.manifest())?;
            io::write_json(
                &FailureRecord {
                    stage: stage_name,
                    error: e.root().to_string(),
                },
                &bundle.failure(),
            )?;
            Err(e)
        }
    }
}

fn run_stages(cfg: &PipelineConfig, bundle: &Bundle, timer: &mut Timer) -> Result<RunOutcome> {
    let data = timer.run("generate", || stage_generate(cfg, bundle))?;
    let (dict, lam) = timer.run("dictionary", || stage_dictionary(cfg, bundle, &data))?;
    let (bank, operator_meta) = timer.run("fit", || stage_fit(cfg, bundle, &dict, &lam, &data))?;
    let synthesis = timer.run("synthesize", || stage_synthesize(cfg, bundle, &dict, &bank))?;
    let report = timer.run("verify", || verify(bundle))?;
    let (open_loop, closed_loop) = timer.run("simulate", || stage_simulate(cfg, bundle, &dict, &synthesis.policy))?;
    Ok(RunOutcome {
        bundle: bundle.clone(),
        config: cfg.clone(),
        dict,
        bank,
        operator_meta,
        synthesis,
        report,
        open_loop,
        closed_loop,
        manifest: Manifest {
            name: String::new(),
            config_hash: String::new(),
            version: String::new(),
            notes: vec![],
            stages: vec![],
            gamma_used: None,
            certificate_pass: None,
            closed_loop_converged: None,
            rollouts: None,
            failed_stage: None,
        },
    })
}

/// Runs a benchmark preset; `output_dir` overrides the default location.
pub fn reproduce(name: &str, output_dir: Option<&Path>) -> Result<RunOutcome> {
    let mut cfg = preset(name)?;
    cfg.output_dir = output_dir.map(Path::to_path_buf);
    run_pipeline(&cfg)
}

/// `Σ_a θ_a` in basis order (attractor entries zero), for plotting.
pub fn occupation_totals(sol: &OccupationSolution<f64>, prob: &StabilizationProblem<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(prob.n_basis(), 1);
    for (row, &j) in prob.free_indices().iter().enumerate() {
        out[(j, 0)] = sol.theta.row(row).sum();
    }
    out
}
