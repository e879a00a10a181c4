//! Deterministic discrete-event simulator and scheduling library for
//! two-tier LLM serving clusters: a structured latency model learned online,
//! an SLO-aware iteration scheduler, a predictive multi-factor router and
//! the baseline policies they are compared against.

// Range checks are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod engine;
pub mod error;
pub mod kv_cache;
pub mod learner;
pub mod lens;
pub mod metrics;
pub mod perf_model;
pub mod presets;
pub mod router;
pub mod sim;
pub mod workload;

pub use error::{MetricsError, ModelError, RouteError, SimError, WorkloadError};
pub use perf_model::{goodness_of_fit, BatchShape, PerfParams};
pub use sim::{run, RunConfig, RunOutput, RunSummary};
