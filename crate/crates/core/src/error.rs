use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported system kind for this operation: {0}")]
    UnknownSystemKind(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("state became non-finite")]
    NonFiniteState,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("malformed row {line}: {reason}")]
    MalformedRow { line: usize, reason: String },

    #[error("dataset action {found} does not match expected action {expected}")]
    ActionMismatch { expected: usize, found: usize },

    #[error("k-means needs at least {k} points, got {n}")]
    TooFewPoints { k: usize, n: usize },

    #[error("overlap matrix is singular")]
    SingularLambda,

    #[error("problem is infeasible: {0}")]
    Infeasible(String),

    #[error("problem is unbounded")]
    Unbounded,

    #[error("iteration limit reached after {0} iterations")]
    MaxIterExceeded(usize),

    #[error("every basis element is in the attractor set")]
    AllStatesAttractor,

    #[error("no operator available for action {0}")]
    MissingAction(usize),

    #[error("power iteration did not converge after {0} iterations")]
    PowerIterationStall(usize),

    #[error("missing artifacts: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingArtifacts(Vec<PathBuf>),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Strips `Stage` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

/// Process exit status for an error: 2 for bad configuration or inputs,
/// 3 for solver failures, 4 for failed verification, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Config(_)
        | Error::UnknownSystemKind(_)
        | Error::DimensionMismatch { .. }
        | Error::Toml(_)
        | Error::EmptyDataset
        | Error::MalformedRow { .. }
        | Error::ActionMismatch { .. }
        | Error::MissingArtifacts(_) => 2,
        Error::Infeasible(_)
        | Error::Unbounded
        | Error::MaxIterExceeded(_)
        | Error::SingularLambda
        | Error::PowerIterationStall(_)
        | Error::AllStatesAttractor
        | Error::TooFewPoints { .. }
        | Error::MissingAction(_) => 3,
        Error::Verification(_) => 4,
        _ => 1,
    }
}
