//! Pipeline configuration, benchmark presets and the config hash.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::FeedbackMode;
use crate::dictionary::{CenterMode, LambdaMethod};
use crate::error::{Error, Result};
use crate::operator::{NsdmdConfig, NsdmdSolver};
use crate::systems::{ControlGrid, SystemKind, SystemSpec, TimeKind};

/// Either an inclusive scalar range `lo:step:hi` or explicit control vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridConfig {
    Range { lo: f64, step: f64, hi: f64 },
    Values { values: Vec<Vec<f64>> },
}

impl GridConfig {
    pub fn build(&self) -> Result<ControlGrid<f64>> {
        match self {
            GridConfig::Range { lo, step, hi } => ControlGrid::scalar_range(*lo, *step, *hi),
            GridConfig::Values { values } => ControlGrid::new(values.iter().map(|v| DVector::from_column_slice(v)).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictionaryConfig {
    pub k_centers: usize,
    pub sigma: f64,
    #[serde(default = "default_center_mode")]
    pub center_mode: CenterMode,
    #[serde(default = "default_kmeans_iter")]
    pub kmeans_max_iter: usize,
    #[serde(default = "default_lambda_method")]
    pub lambda_method: LambdaMethod,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
}

fn default_center_mode() -> CenterMode {
    CenterMode::KMeans
}
fn default_kmeans_iter() -> usize {
    300
}
fn default_lambda_method() -> LambdaMethod {
    LambdaMethod::ClosedForm
}
fn default_mc_samples() -> usize {
    1_000_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_traj: usize,
    pub traj_len: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilizationConfig {
    pub gamma: f64,
    /// Attractor radius; defaults to `2σ`.
    #[serde(default)]
    pub r_att: Option<f64>,
    /// Target points (one per attractor point).
    pub targets: Vec<Vec<f64>>,
    #[serde(default = "one")]
    pub state_weight: f64,
    #[serde(default = "one")]
    pub control_weight: f64,
    #[serde(default)]
    pub normalize: bool,
    #[serde(default)]
    pub feedback_mode: FeedbackMode,
    #[serde(default)]
    pub grid_snap: bool,
    /// Smaller values of `γ` tried in order when the LP is infeasible.
    #[serde(default)]
    pub gamma_fallback: Vec<f64>,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub horizon: usize,
    /// Number of uniformly sampled initial states.
    pub n_random: usize,
    pub seed: u64,
    #[serde(default)]
    pub initial_states: Vec<Vec<f64>>,
    /// Convergence ball radius; defaults to the attractor radius.
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default = "default_dwell")]
    pub dwell: usize,
}

fn default_dwell() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NsdmdSection {
    #[serde(default = "default_tol_feas")]
    pub tol_feas: f64,
    #[serde(default = "default_tol_opt")]
    pub tol_opt: f64,
    #[serde(default = "default_nsdmd_iter")]
    pub max_iter: usize,
    #[serde(default = "default_true")]
    pub post_project: bool,
    #[serde(default = "default_solver")]
    pub solver: NsdmdSolver,
}

fn default_tol_feas() -> f64 {
    1e-8
}
fn default_tol_opt() -> f64 {
    1e-7
}
fn default_nsdmd_iter() -> usize {
    1000
}
fn default_true() -> bool {
    true
}
fn default_solver() -> NsdmdSolver {
    NsdmdSolver::Auto
}

impl Default for NsdmdSection {
    fn default() -> Self {
        NsdmdSection {
            tol_feas: default_tol_feas(),
            tol_opt: default_tol_opt(),
            max_iter: default_nsdmd_iter(),
            post_project: true,
            solver: default_solver(),
        }
    }
}

impl NsdmdSection {
    pub fn to_config(&self) -> NsdmdConfig<f64> {
        NsdmdConfig {
            tol_feas: self.tol_feas,
            tol_opt: self.tol_opt,
            max_iter: self.max_iter,
            post_project: self.post_project,
            solver: self.solver,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub name: String,
    pub system: SystemSpec<f64>,
    pub grid: GridConfig,
    pub dictionary: DictionaryConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub nsdmd: NsdmdSection,
    pub stabilization: StabilizationConfig,
    pub simulation: SimulationConfig,
    /// Notes copied into the run manifest (e.g. corrected parameters).
    #[serde(default)]
    pub notes: Vec<String>,
    /// Excluded from the config hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?,
            _ => toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn r_att(&self) -> f64 {
        self.stabilization.r_att.unwrap_or(2.0 * self.dictionary.sigma)
    }

    pub fn sim_radius(&self) -> f64 {
        self.simulation.radius.unwrap_or_else(|| self.r_att())
    }

    pub fn targets(&self) -> Vec<DVector<f64>> {
        self.stabilization.targets.iter().map(|t| DVector::from_column_slice(t)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        if self.system.kind == SystemKind::ExternalData {
            return Err(Error::Config("external-data systems cannot run the generating pipeline".into()));
        }
        let grid = self.grid.build()?;
        if grid.dim() != 1 {
            return Err(Error::Config("the benchmark systems take a scalar control".into()));
        }
        let d = &self.dictionary;
        if !(d.sigma > 0.0) || !d.sigma.is_finite() {
            return Err(Error::Config(format!("dictionary sigma must be positive, got {}", d.sigma)));
        }
        if d.k_centers < 2 {
            return Err(Error::Config("dictionary needs at least two centers".into()));
        }
        if self.data.n_traj == 0 || self.data.traj_len == 0 {
            return Err(Error::Config("n_traj and traj_len must be at least 1".into()));
        }
        self.nsdmd.to_config().validate()?;
        let s = &self.stabilization;
        if !(s.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be positive, got {}", s.gamma)));
        }
        if s.gamma_fallback.iter().any(|&g| !(g > 0.0)) {
            return Err(Error::Config("gamma fallbacks must be positive".into()));
        }
        if let Some(r) = s.r_att {
            if !(r > 0.0) {
                return Err(Error::Config("r_att must be positive".into()));
            }
        }
        if s.targets.is_empty() || s.targets.iter().any(|t| t.len() != self.system.state_dim) {
            return Err(Error::Config(format!(
                "targets must be nonempty points of dimension {}",
                self.system.state_dim
            )));
        }
        if !(s.state_weight >= 0.0) || !(s.control_weight >= 0.0) {
            return Err(Error::Config("cost weights must be nonnegative".into()));
        }
        if self.simulation.initial_states.iter().any(|x| x.len() != self.system.state_dim) {
            return Err(Error::Config("initial states have the wrong dimension".into()));
        }
        if self.simulation.dwell == 0 {
            return Err(Error::Config("dwell must be at least 1".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, without `output_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let value = serde_json::to_value(&c).expect("config serializes");
        let mut h = Sha256::new();
        h.update(serde_json::to_string(&value).expect("value serializes").as_bytes());
        hex::encode(h.finalize())
    }
}

pub const BENCHMARKS: [&str; 4] = ["cubic_logistic", "duffing", "double_well", "standard_map"];

/// Benchmark presets.
pub fn preset(name: &str) -> Result<PipelineConfig> {
    let kind = match name {
        "cubic_logistic" => SystemKind::CubicLogistic,
        "duffing" => SystemKind::Duffing,
        "double_well" => SystemKind::DoubleWell,
        "standard_map" => SystemKind::StandardMap,
        other => return Err(Error::Config(format!("unknown benchmark `{other}`; expected one of {}", BENCHMARKS.join(", ")))),
    };
    let stab = |gamma: f64, r_att: Option<f64>, targets: Vec<Vec<f64>>| StabilizationConfig {
        gamma,
        r_att,
        targets,
        state_weight: 1.0,
        control_weight: 1.0,
        normalize: false,
        feedback_mode: FeedbackMode::PartitionOfUnity,
        grid_snap: false,
        gamma_fallback: vec![1.02, 1.01, 1.005, 1.001],
    };
    let dict = |k_centers: usize, sigma: f64| DictionaryConfig {
        k_centers,
        sigma,
        center_mode: CenterMode::KMeans,
        kmeans_max_iter: default_kmeans_iter(),
        lambda_method: LambdaMethod::ClosedForm,
        mc_samples: default_mc_samples(),
    };
    let cfg = match kind {
        SystemKind::CubicLogistic => PipelineConfig {
            name: name.into(),
            system: SystemSpec::cubic_logistic(2.3),
            grid: GridConfig::Range { lo: -0.2, step: 0.02, hi: 0.2 },
            dictionary: dict(200, 0.008),
            data: DataConfig { n_traj: 1000, traj_len: 10, seed: 1 },
            nsdmd: NsdmdSection::default(),
            stabilization: stab(1.05, None, vec![vec![0.0]]),
            simulation: SimulationConfig {
                horizon: 20,
                n_random: 50,
                seed: 2,
                initial_states: vec![vec![0.5], vec![-1.2]],
                radius: Some(0.05),
                dwell: default_dwell(),
            },
            notes: vec![],
            output_dir: None,
        },
        SystemKind::Duffing => PipelineConfig {
            name: name.into(),
            system: SystemSpec::duffing(0.5),
            grid: GridConfig::Range { lo: -4.0, step: 0.5, hi: 4.0 },
            dictionary: dict(100, 0.2),
            data: DataConfig { n_traj: 500, traj_len: 20, seed: 1 },
            nsdmd: NsdmdSection::default(),
            stabilization: stab(1.05, Some(0.15), vec![vec![0.0, 0.0]]),
            simulation: SimulationConfig {
                horizon: 200,
                n_random: 20,
                seed: 2,
                initial_states: vec![vec![1.5, 0.0], vec![-1.0, 1.0]],
                radius: Some(0.15),
                dwell: default_dwell(),
            },
            notes: vec![],
            output_dir: None,
        },
        SystemKind::DoubleWell => PipelineConfig {
            name: name.into(),
            system: SystemSpec::double_well(0.5, 0.0),
            grid: GridConfig::Range { lo: -2.0, step: 0.2, hi: 2.0 },
            dictionary: dict(100, 0.22),
            data: DataConfig { n_traj: 500, traj_len: 20, seed: 1 },
            nsdmd: NsdmdSection::default(),
            stabilization: stab(1.05, Some(0.15), vec![vec![0.5, 0.0]]),
            simulation: SimulationConfig {
                horizon: 200,
                n_random: 20,
                seed: 2,
                initial_states: vec![vec![-1.0, 0.5], vec![1.5, 0.0]],
                radius: Some(0.15),
                dwell: default_dwell(),
            },
            notes: vec![],
            output_dir: None,
        },
        SystemKind::StandardMap => PipelineConfig {
            name: name.into(),
            system: SystemSpec::standard_map(0.25),
            grid: GridConfig::Range { lo: -0.5, step: 0.02, hi: 0.5 },
            dictionary: dict(200, 0.02),
            data: DataConfig { n_traj: 1000, traj_len: 10, seed: 1 },
            nsdmd: NsdmdSection::default(),
            stabilization: stab(1.05, None, vec![vec![0.25, 0.5], vec![0.75, 0.5]]),
            simulation: SimulationConfig {
                horizon: 100,
                n_random: 20,
                seed: 2,
                initial_states: vec![vec![0.3, 0.45]],
                radius: Some(0.05),
                dwell: default_dwell(),
            },
            notes: vec!["control grid corrected to -0.5:0.02:0.5 (a single-value grid 0.5:0.02:0.5 cannot stabilize)".into()],
            output_dir: None,
        },
        SystemKind::ExternalData => unreachable!(),
    };
    debug_assert!(cfg.system.time_kind == TimeKind::DiscreteMap || cfg.system.dt > 0.0);
    cfg.validate()?;
    Ok(cfg)
}
