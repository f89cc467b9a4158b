use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse grouping of failures, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Ingestion,
    Divergence,
    Io,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("topology error: {0}")]
    Topology(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: expected length {expected}, got {actual} ({what})")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("power flow sweep did not converge after {iterations} iterations (last change {last_change:.3e})")]
    SweepDivergence { iterations: usize, last_change: f64 },

    #[error("comfort band unreachable for TCL at node {node}, device {device}: {detail}")]
    HullInfeasible {
        node: usize,
        device: usize,
        detail: String,
    },

    #[error("setpoint {value} outside rate grid span [{min}, {max}]")]
    OutOfRange { value: f64, min: f64, max: f64 },

    #[error("clock error: {0}")]
    Clock(String),

    #[error("dual divergence at iteration {iteration}: entry {value:.3e} exceeds sentinel {sentinel:.1e}")]
    DualDivergence {
        iteration: u64,
        value: f64,
        sentinel: f64,
    },

    #[error("oracle did not converge in {iterations} iterations (KKT residual {residual:.3e})")]
    OracleNonConvergence { iterations: usize, residual: f64 },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("ingestion error in {path}, row {row}: {message}")]
    Ingestion {
        path: String,
        row: usize,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Topology(_)
            | Error::Parameter(_)
            | Error::Shape { .. }
            | Error::Clock(_)
            | Error::Parse { .. }
            | Error::Config(_) => ErrorKind::Config,
            Error::Ingestion { .. } => ErrorKind::Ingestion,
            Error::SweepDivergence { .. }
            | Error::DualDivergence { .. }
            | Error::OracleNonConvergence { .. } => ErrorKind::Divergence,
            Error::Io { .. } => ErrorKind::Io,
            Error::HullInfeasible { .. } | Error::OutOfRange { .. } | Error::NonFinite(_) => ErrorKind::Numerical,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Shape {
            what,
            expected,
            actual,
        });
    }
    Ok(())
}
