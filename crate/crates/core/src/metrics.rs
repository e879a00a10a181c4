//! Per-request and aggregate serving metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::MetricsError;
use crate::lens::SloSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub request_id: u64,
    pub session_id: u64,
    pub arrival: f64,
    pub first_token_at: f64,
    pub completed_at: f64,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
    pub engine_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RequestMetrics {
    pub ttft: f64,
    pub tpot: f64,
    pub e2e: f64,
    /// TPOT is undefined for one-token outputs and reported as 0.
    pub single_token: bool,
}

pub fn request_metrics(rec: &RequestRecord) -> Result<RequestMetrics, MetricsError> {
    let ordered = rec.arrival <= rec.first_token_at && rec.first_token_at <= rec.completed_at;
    if !ordered || rec.output_tokens == 0 || !rec.completed_at.is_finite() {
        return Err(MetricsError::InvalidRecord {
            request_id: rec.request_id,
        });
    }
    let single_token = rec.output_tokens < 2;
    Ok(RequestMetrics {
        ttft: rec.first_token_at - rec.arrival,
        tpot: if single_token {
            0.0
        } else {
            (rec.completed_at - rec.first_token_at) / (rec.output_tokens - 1) as f64
        },
        e2e: rec.completed_at - rec.arrival,
        single_token,
    })
}

/// Nearest-rank percentile.
pub fn percentile(values: &[f64], p: f64) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(MetricsError::InvalidPercentile(p));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

pub fn meets_slo(m: &RequestMetrics, slo: &SloSpec) -> bool {
    m.ttft <= slo.ttft_slo && (m.single_token || m.tpot <= slo.tpot_slo)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Attainment {
    pub percent: f64,
    /// No records: reported as 100%.
    pub empty: bool,
}

pub fn slo_attainment(records: &[RequestRecord], slo: &SloSpec) -> Result<Attainment, MetricsError> {
    if records.is_empty() {
        return Ok(Attainment {
            percent: 100.0,
            empty: true,
        });
    }
    let mut pass = 0usize;
    for rec in records {
        pass += meets_slo(&request_metrics(rec)?, slo) as usize;
    }
    Ok(Attainment {
        percent: 100.0 * pass as f64 / records.len() as f64,
        empty: false,
    })
}

/// Aggregate report for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub submitted: usize,
    pub completed: usize,
    /// Requests still queued or running when the run stopped.
    pub unfinished: usize,
    /// Requests an engine refused at admission.
    pub rejected: usize,
    pub p50_e2e: Option<f64>,
    pub p90_e2e: Option<f64>,
    pub p50_ttft: Option<f64>,
    pub p90_ttft: Option<f64>,
    pub p50_tpot: Option<f64>,
    pub p90_tpot: Option<f64>,
    pub mean_ttft: Option<f64>,
    pub mean_tpot: Option<f64>,
    /// Attainment over completed requests only.
    pub slo_attainment_completed: f64,
    /// Attainment over every submitted request; unfinished and rejected ones fail.
    pub slo_attainment: f64,
    /// Completed requests per second of simulated time.
    pub throughput_rps: f64,
    /// Fraction of submitted requests routed to each engine.
    pub engine_share: BTreeMap<u32, f64>,
}

pub struct SummaryInput<'a> {
    pub records: &'a [RequestRecord],
    pub submitted: usize,
    pub unfinished: usize,
    pub rejected: usize,
    pub routed: &'a BTreeMap<u32, usize>,
    pub span_ms: f64,
}

pub fn summarize(input: &SummaryInput, slo: &SloSpec) -> Result<MetricsSummary, MetricsError> {
    let metrics: Vec<RequestMetrics> = input.records.iter().map(request_metrics).collect::<Result<_, _>>()?;
    let ttft: Vec<f64> = metrics.iter().map(|m| m.ttft).collect();
    let e2e: Vec<f64> = metrics.iter().map(|m| m.e2e).collect();
    let tpot: Vec<f64> = metrics.iter().filter(|m| !m.single_token).map(|m| m.tpot).collect();
    let pct = |v: &[f64], p: f64| percentile(v, p).ok();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let pass = metrics.iter().filter(|m| meets_slo(m, slo)).count();
    let total_routed: usize = input.routed.values().sum();
    Ok(MetricsSummary {
        submitted: input.submitted,
        completed: metrics.len(),
        unfinished: input.unfinished,
        rejected: input.rejected,
        p50_e2e: pct(&e2e, 50.0),
        p90_e2e: pct(&e2e, 90.0),
        p50_ttft: pct(&ttft, 50.0),
        p90_ttft: pct(&ttft, 90.0),
        p50_tpot: pct(&tpot, 50.0),
        p90_tpot: pct(&tpot, 90.0),
        mean_ttft: mean(&ttft),
        mean_tpot: mean(&tpot),
        slo_attainment_completed: if metrics.is_empty() {
            100.0
        } else {
            100.0 * pass as f64 / metrics.len() as f64
        },
        slo_attainment: if input.submitted == 0 {
            100.0
        } else {
            100.0 * pass as f64 / input.submitted as f64
        },
        throughput_rps: if input.span_ms > 0.0 {
            metrics.len() as f64 / (input.span_ms / 1000.0)
        } else {
            0.0
        },
        engine_share: input
            .routed
            .iter()
            .map(|(&e, &n)| {
                (
                    e,
                    if total_routed == 0 {
                        0.0
                    } else {
                        n as f64 / total_routed as f64
                    },
                )
            })
            .collect(),
    })
}

/// Long-form per-request CSV row.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RequestRow {
    pub request_id: u64,
    pub session_id: u64,
    pub engine_id: u32,
    pub arrival_ms: f64,
    pub first_token_ms: f64,
    pub completed_ms: f64,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
    pub ttft_ms: f64,
    pub tpot_ms: f64,
    pub e2e_ms: f64,
    pub slo_met: bool,
}

pub fn write_requests_csv(
    records: &[RequestRecord],
    slo: &SloSpec,
    out: impl std::io::Write,
) -> Result<(), crate::error::SimError> {
    let mut w = csv::Writer::from_writer(out);
    for rec in records {
        let m = request_metrics(rec)?;
        w.serialize(RequestRow {
            request_id: rec.request_id,
            session_id: rec.session_id,
            engine_id: rec.engine_id,
            arrival_ms: rec.arrival,
            first_token_ms: rec.first_token_at,
            completed_ms: rec.completed_at,
            prompt_tokens: rec.prompt_tokens,
            output_tokens: rec.output_tokens,
            ttft_ms: m.ttft,
            tpot_ms: m.tpot,
            e2e_ms: m.e2e,
            slo_met: meets_slo(&m, slo),
        })?;
    }
    w.flush().map_err(|e| crate::error::SimError::io("requests.csv", e))?;
    Ok(())
}
