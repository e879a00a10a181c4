use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the latency model and its fit diagnostics.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid batch shape: b={b}, s={s} (need b >= 1 and s >= b)")]
    InvalidShape { b: u32, s: u32 },
    #[error("invalid parameter {name}={value}: {reason}")]
    InvalidParam {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("fit is undefined: {0}")]
    UndefinedFit(&'static str),
}

/// Errors raised while reading traces or generating workloads.
#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid workload config: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("record {request_id} violates arrival <= first_token_at <= completed_at")]
    InvalidRecord { request_id: u64 },
    #[error("percentile of an empty sample")]
    Empty,
    #[error("percentile rank {0} is outside (0, 100]")]
    InvalidPercentile(f64),
}

#[derive(Debug, Error)]
pub enum RouteError {
    #[error("no engines registered with the router")]
    NoEngines,
}

/// Top-level error for configuring and running simulations.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Route(#[from] RouteError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("simulation aborted: {0}")]
    Abort(String),
}

impl SimError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SimError::Io {
            path: path.into(),
            source,
        }
    }
}
