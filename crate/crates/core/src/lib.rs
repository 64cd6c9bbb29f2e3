//! Data-driven stabilization of nonlinear systems through learned
//! Perron–Frobenius operators.
//!
//! The numerical modules are generic over [`Real`] (`f32` or `f64`); the
//! type aliases below fix the scalar to `f64`, which is what the file
//! formats and the pipeline use.

pub mod config;
pub mod control;
pub mod dictionary;
pub mod error;
pub mod io;
pub mod linalg;
pub mod operator;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod systems;

pub use error::{exit_code, Error, Result};
pub use scalar::Real;

pub type SystemSpec = systems::SystemSpec<f64>;
pub type StateBox = systems::StateBox<f64>;
pub type ControlGrid = systems::ControlGrid<f64>;
pub type TrajectoryDataset = systems::TrajectoryDataset<f64>;
pub type RbfDictionary = dictionary::RbfDictionary<f64>;
pub type GramSet = dictionary::GramSet<f64>;
pub type LambdaMatrix = dictionary::LambdaMatrix<f64>;
pub type KoopmanMatrix = operator::KoopmanMatrix<f64>;
pub type PfMatrix = operator::PfMatrix<f64>;
pub type NsdmdConfig = operator::NsdmdConfig<f64>;
pub type OperatorBank = control::OperatorBank<f64>;
pub type StabilizationProblem = control::StabilizationProblem<f64>;
pub type OccupationSolution = control::OccupationSolution<f64>;
pub type Policy = control::Policy<f64>;
pub type LyapunovCertificate = control::LyapunovCertificate<f64>;
pub type LpProblem = optim::LpProblem<f64>;
pub type QpProblem = optim::QpProblem<f64>;
