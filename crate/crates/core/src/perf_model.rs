//! Structured single-iteration latency model.
//!
//! Step latency for a batch of `B` requests carrying `S` scheduled tokens is
//! decomposed into a fixed overhead, a compute term and two linear overheads:
//!
//! ```text
//! T(B, S)   = tau0 + (w0 + ws * S) / Thr(B, S) + tauB * B + tauS * S
//! Thr(B, S) = p_max * (1 - exp(-kB * B)) * (1 - exp(-kS * S))
//! ```
//!
//! Latencies are milliseconds and throughput is tokens per millisecond
//! everywhere in the crate.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::learner::LatencySample;

/// The eight coefficients of the latency model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfParams {
    /// Fixed per-step overhead (ms).
    pub tau0: f64,
    /// Workload intercept (token-equivalents).
    pub w0: f64,
    /// Workload slope (token-equivalents per token).
    pub ws: f64,
    /// Per-request overhead (ms per request).
    #[serde(rename = "tauB")]
    pub tau_b: f64,
    /// Per-token overhead (ms per token).
    #[serde(rename = "tauS")]
    pub tau_s: f64,
    /// Peak throughput (tokens per ms).
    pub p_max: f64,
    /// Parallelism saturation rate (per request).
    #[serde(rename = "kB")]
    pub k_b: f64,
    /// Token saturation rate (per token).
    #[serde(rename = "kS")]
    pub k_s: f64,
}

impl PerfParams {
    /// Deliberately uncalibrated starting point for online learning.
    pub const ZERO_CONFIG_PRIOR: PerfParams = PerfParams {
        tau0: 5.0,
        w0: 0.0,
        ws: 1.0,
        tau_b: 0.1,
        tau_s: 0.001,
        p_max: 20.0,
        k_b: 0.1,
        k_s: 0.001,
    };

    pub fn validate(&self) -> Result<(), ModelError> {
        fn check(name: &'static str, value: f64, ok: bool, reason: &'static str) -> Result<(), ModelError> {
            if value.is_finite() && ok {
                Ok(())
            } else {
                Err(ModelError::InvalidParam { name, value, reason })
            }
        }
        check("p_max", self.p_max, self.p_max > 0.0, "must be > 0")?;
        check("kB", self.k_b, self.k_b > 0.0, "must be > 0")?;
        check("kS", self.k_s, self.k_s > 0.0, "must be > 0")?;
        check("ws", self.ws, self.ws > 0.0, "must be > 0")?;
        check("tau0", self.tau0, self.tau0 >= 0.0, "must be >= 0")?;
        check("w0", self.w0, self.w0 >= 0.0, "must be >= 0")?;
        check("tauB", self.tau_b, self.tau_b >= 0.0, "must be >= 0")?;
        check("tauS", self.tau_s, self.tau_s >= 0.0, "must be >= 0")?;
        Ok(())
    }

    /// Effective throughput `Thr(B, S)` in tokens per ms.
    pub fn throughput(&self, shape: BatchShape) -> f64 {
        self.p_max * saturation(self.k_b, shape.b as f64) * saturation(self.k_s, shape.s as f64)
    }

    /// Predicted single-iteration latency in ms.
    pub fn predict_latency(&self, shape: BatchShape) -> f64 {
        let s = shape.s as f64;
        let work = self.w0 + self.ws * s;
        self.tau0 + work / self.throughput(shape) + self.tau_b * shape.b as f64 + self.tau_s * s
    }

    /// Reference batch shape for [`PerfParams::effective_token_rate`].
    pub const RATE_REFERENCE: (u32, u32) = (32, 2048);

    /// Tokens per ms of a full step at the reference shape, overheads
    /// included. Individual coefficients can be unidentifiable (`ws`, `w0`
    /// and `tauS` are collinear once throughput saturates) while predictions
    /// stay well constrained, so this is the robust speed summary.
    pub fn effective_token_rate(&self) -> f64 {
        let (b, s) = Self::RATE_REFERENCE;
        s as f64 / self.predict_latency(BatchShape { b, s })
    }

    /// Largest `w0` for which `T(B, ·)` is guaranteed strictly increasing over
    /// integer `S >= 1`.
    ///
    /// The intercept term `w0 / (1 - exp(-kS * S))` decreases in `S`; it is
    /// dominated by the slope term whenever `w0 * kS / ws < exp(kS) - 1 - kS`.
    pub fn monotone_w0_limit(&self) -> f64 {
        self.ws * (self.k_s.exp_m1() - self.k_s) / self.k_s
    }

    /// Whether token-budget bisection over this model is exact.
    pub fn is_token_monotone(&self) -> bool {
        self.w0 <= self.monotone_w0_limit()
    }
}

/// `1 - exp(-k * x)` without cancellation for small `k * x`.
#[inline]
pub(crate) fn saturation(k: f64, x: f64) -> f64 {
    -(-k * x).exp_m1()
}

/// Batch shape of one iteration: `b` requests carrying `s` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawShape", into = "RawShape")]
pub struct BatchShape {
    b: u32,
    s: u32,
}

#[derive(Serialize, Deserialize)]
struct RawShape {
    b: u32,
    s: u32,
}

impl TryFrom<RawShape> for BatchShape {
    type Error = ModelError;

    fn try_from(raw: RawShape) -> Result<Self, Self::Error> {
        BatchShape::new(raw.b, raw.s)
    }
}

impl From<BatchShape> for RawShape {
    fn from(shape: BatchShape) -> Self {
        RawShape { b: shape.b, s: shape.s }
    }
}

impl BatchShape {
    pub fn new(b: u32, s: u32) -> Result<Self, ModelError> {
        if b >= 1 && s >= b {
            Ok(BatchShape { b, s })
        } else {
            Err(ModelError::InvalidShape { b, s })
        }
    }

    pub fn b(&self) -> u32 {
        self.b
    }

    pub fn s(&self) -> u32 {
        self.s
    }
}

/// Coefficient of determination of `params` against observed step latencies.
pub fn goodness_of_fit(params: &PerfParams, samples: &[LatencySample]) -> Result<f64, ModelError> {
    if samples.len() < 2 {
        return Err(ModelError::UndefinedFit("need at least 2 samples"));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.observed_ms).sum::<f64>() / n;
    let ss_tot: f64 = samples.iter().map(|s| (s.observed_ms - mean).powi(2)).sum();
    if ss_tot <= f64::EPSILON * mean.abs().max(1.0) * n {
        return Err(ModelError::UndefinedFit("observed latencies have zero variance"));
    }
    let ss_res: f64 = samples
        .iter()
        .map(|s| (s.observed_ms - params.predict_latency(s.shape)).powi(2))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn saturated() -> PerfParams {
        PerfParams {
            tau0: 5.0,
            w0: 0.0,
            ws: 1.0,
            tau_b: 0.0,
            tau_s: 0.0,
            p_max: 1.0,
            k_b: 1000.0,
            k_s: 1000.0,
        }
    }

    #[test]
    fn saturated_throughput_hits_peak() {
        let p = PerfParams {
            p_max: 10.0,
            ..saturated()
        };
        let thr = p.throughput(BatchShape::new(4, 100).unwrap());
        assert!((thr - 10.0).abs() < 1e-9);
    }

    #[test]
    fn saturated_latency_is_linear() {
        let t = saturated().predict_latency(BatchShape::new(4, 100).unwrap());
        assert!((t - 105.0).abs() < 1e-6, "{t}");
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(BatchShape::new(0, 0).is_err());
        assert!(BatchShape::new(3, 2).is_err());
        assert!(serde_json::from_str::<BatchShape>(r#"{"b":0,"s":4}"#).is_err());
    }

    #[test]
    fn validate_catches_each_field() {
        let good = PerfParams::ZERO_CONFIG_PRIOR;
        assert!(good.validate().is_ok());
        assert!(PerfParams { p_max: 0.0, ..good }.validate().is_err());
        assert!(PerfParams { k_s: -1.0, ..good }.validate().is_err());
        assert!(PerfParams { ws: 0.0, ..good }.validate().is_err());
        assert!(PerfParams { tau0: f64::NAN, ..good }.validate().is_err());
    }

    #[test]
    fn json_uses_flat_field_names() {
        let json = serde_json::to_value(PerfParams::ZERO_CONFIG_PRIOR).unwrap();
        for key in ["tau0", "w0", "ws", "tauB", "tauS", "p_max", "kB", "kS"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(json.as_object().unwrap().len(), 8);
    }

    #[test]
    fn constant_predictor_scores_nonpositive() {
        // Saturated model with no token dependence predicts tau0 everywhere.
        let p = PerfParams {
            ws: 1e-12,
            ..saturated()
        };
        let samples: Vec<_> = (1..20)
            .map(|i| LatencySample::new(BatchShape::new(1, i).unwrap(), 5.0 + i as f64, 0.0))
            .collect();
        assert!(goodness_of_fit(&p, &samples).unwrap() <= 0.0);
    }

    #[test]
    fn fit_needs_variance() {
        let shape = BatchShape::new(1, 1).unwrap();
        let one = [LatencySample::new(shape, 3.0, 0.0)];
        assert!(goodness_of_fit(&saturated(), &one).is_err());
        let flat = [LatencySample::new(shape, 3.0, 0.0), LatencySample::new(shape, 3.0, 1.0)];
        assert!(goodness_of_fit(&saturated(), &flat).is_err());
    }
}
