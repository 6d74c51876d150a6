use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("unresolved length reference `{name}` in link `{link}`")]
    UnknownLength { link: String, name: String },

    #[error("model structure: {0}")]
    Structure(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    #[error("rank-underdetermined: {rows} regressor rows for {cols} parameters")]
    RankUnderdetermined { rows: usize, cols: usize },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("scaling: {0}")]
    Scaling(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("solver did not converge after {iterations} iterations: {detail}")]
    NotConverged {
        iterations: usize,
        detail: String,
        /// Best iterate found, in the solver's parameter layout.
        best: Vec<f64>,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("{path}:{line}: timestamps not strictly increasing")]
    Ordering { path: PathBuf, line: u64 },

    #[error("padding: series of {got} samples is too short for {needed} samples of edge padding")]
    Padding { needed: usize, got: usize },

    #[error("precondition: {0}")]
    Precondition(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("unstable simulation: {0}")]
    Unstable(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
