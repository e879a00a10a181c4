//! SLO-aware iteration scheduler.
//!
//! Every iteration the scheduler picks a latency target between the TTFT-
//! and TPOT-derived bounds, then scans batch sizes: for each candidate `B`
//! it bisects the largest token budget the latency model predicts will fit
//! the target, fills that budget greedily (running decodes first, then
//! waiting prefills in arrival order, chunked) and keeps the realised plan
//! whose predicted latency lands closest to the target.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::perf_model::{BatchShape, PerfParams};

pub const BETA_MIN: f64 = 1e-3;
pub const L_BAR_SMOOTHING: f64 = 0.05;
pub const TRADEOFF_WINDOW: usize = 200;
const TRADEOFF_MIN_POINTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SloSpec {
    pub ttft_slo: f64,
    pub tpot_slo: f64,
}

impl SloSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.ttft_slo > 0.0 && self.tpot_slo > 0.0 {
            Ok(())
        } else {
            Err("SLO bounds must be > 0".into())
        }
    }
}

/// Linear TTFT-vs-TPOT model `ttft ≈ alpha - beta * tpot`, plus the expected
/// decode length and the target floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffModel {
    pub alpha: f64,
    pub beta: f64,
    pub l_bar: f64,
    pub td_min: f64,
}

impl TradeoffModel {
    /// Starting model that places the TTFT bound on the TPOT bound, so the
    /// first targets sit at the TPOT SLO until history says otherwise.
    pub fn initial(slo: &SloSpec, l_bar: f64, td_min: f64) -> Self {
        TradeoffModel {
            alpha: slo.ttft_slo + slo.tpot_slo,
            beta: 1.0,
            l_bar,
            td_min,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.beta > 0.0) || !(self.l_bar >= 1.0) || !(self.td_min > 0.0) || !self.alpha.is_finite() {
            return Err("tradeoff model needs beta > 0, l_bar >= 1, td_min > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestState {
    Waiting,
    Running,
    Finished,
}

/// A request as seen by an engine.
///
/// `target_decode` is the ground-truth output length. Scheduling policies
/// never read it; the engine uses it to decide when a request finishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub session_id: u64,
    pub prompt_len: u32,
    pub prefilled: u32,
    /// Output tokens produced so far; the first is emitted when prefill completes.
    pub decoded: u32,
    pub target_decode: u32,
    pub arrival: f64,
    pub first_token_at: Option<f64>,
    pub state: RequestState,
}

impl Request {
    pub fn new(id: u64, session_id: u64, prompt_len: u32, target_decode: u32, arrival: f64) -> Self {
        Request {
            id,
            session_id,
            prompt_len,
            prefilled: 0,
            decoded: 0,
            target_decode,
            arrival,
            first_token_at: None,
            state: RequestState::Waiting,
        }
    }

    pub fn remaining_prompt(&self) -> u32 {
        self.prompt_len - self.prefilled
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub m_max: u32,
    pub q_max: u32,
    pub n_search_iters: u32,
    pub eps_ratio: f64,
    pub q_ref: u32,
    pub td_min: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            m_max: 8192,
            q_max: 256,
            n_search_iters: 10,
            eps_ratio: 0.05,
            q_ref: 16,
            td_min: 2.0,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.q_max < 1 || self.m_max < self.q_max {
            return Err("scheduler needs m_max >= q_max >= 1".into());
        }
        if self.n_search_iters < 1 {
            return Err("scheduler needs n_search_iters >= 1".into());
        }
        if !(self.eps_ratio > 0.0 && self.eps_ratio < 1.0) {
            return Err("scheduler needs 0 < eps_ratio < 1".into());
        }
        if self.q_ref < 1 || !(self.td_min > 0.0) {
            return Err("scheduler needs q_ref >= 1 and td_min > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationKind {
    Prefill,
    Decode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub request_id: u64,
    pub tokens: u32,
    pub kind: AllocationKind,
}

/// One iteration's token allocation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub allocations: Vec<Allocation>,
    pub b: u32,
    pub s: u32,
    pub predicted_ms: f64,
    pub target_ms: f64,
    /// The TTFT and TPOT bounds could not both be met.
    pub slo_risk: bool,
    /// More running requests than `q_max`; the plan was truncated.
    pub overload: bool,
}

impl BatchPlan {
    pub fn from_allocations(allocations: Vec<Allocation>) -> Self {
        let b = allocations.len() as u32;
        let s = allocations.iter().map(|a| a.tokens).sum();
        BatchPlan {
            allocations,
            b,
            s,
            ..BatchPlan::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.allocations.is_empty()
    }

    pub fn shape(&self) -> Option<BatchShape> {
        BatchShape::new(self.b, self.s).ok()
    }

    /// Re-derives `b`, `s` and the predicted latency after editing allocations.
    pub fn refresh(&mut self, params: &PerfParams) {
        self.b = self.allocations.len() as u32;
        self.s = self.allocations.iter().map(|a| a.tokens).sum();
        self.predicted_ms = self.shape().map_or(0.0, |sh| params.predict_latency(sh));
    }

    /// Checks the structural invariants against the queues the plan was
    /// built from.
    pub fn check(&self, run_q: &[Request], wait_q: &[Request], m_max: u32, q_max: u32) -> Result<(), String> {
        let s: u32 = self.allocations.iter().map(|a| a.tokens).sum();
        if s != self.s || self.allocations.len() as u32 != self.b {
            return Err(format!(
                "plan totals mismatch: b={} s={} actual ({}, {s})",
                self.b,
                self.s,
                self.allocations.len()
            ));
        }
        if self.s > m_max || self.b > q_max {
            return Err(format!(
                "plan exceeds caps: b={} s={} (q_max={q_max}, m_max={m_max})",
                self.b, self.s
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for a in &self.allocations {
            if !seen.insert(a.request_id) {
                return Err(format!("request {} allocated twice", a.request_id));
            }
            match a.kind {
                AllocationKind::Decode => {
                    if a.tokens != 1 || !run_q.iter().any(|r| r.id == a.request_id) {
                        return Err(format!("bad decode allocation {a:?}"));
                    }
                }
                AllocationKind::Prefill => {
                    let req = wait_q
                        .iter()
                        .find(|r| r.id == a.request_id)
                        .ok_or_else(|| format!("prefill for unknown request {}", a.request_id))?;
                    if a.tokens == 0 || a.tokens > req.remaining_prompt() {
                        return Err(format!("bad prefill allocation {a:?}"));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetDecision {
    pub target_ms: f64,
    pub slo_risk: bool,
}

/// Adaptive per-iteration latency target.
///
/// The TTFT bound `(alpha - ttft_slo) / beta` and TPOT bound `tpot_slo`
/// delimit the feasible TPOT interval. Long expected outputs (`l_bar > beta`)
/// sit at the low end (floored at `td_min`), short ones at the TPOT bound.
/// With `wait_count` queued requests the target moves toward the TPOT bound
/// by `min(1, wait_count / q_ref)`.
pub fn target_latency(wait_count: usize, slo: &SloSpec, tm: &TradeoffModel, q_ref: u32) -> TargetDecision {
    let td_ttft = (tm.alpha - slo.ttft_slo) / tm.beta;
    let td_tpot = slo.tpot_slo;

    let (base, slo_risk) = if td_ttft > td_tpot {
        (td_tpot, true)
    } else if tm.l_bar > tm.beta {
        (td_tpot.min(tm.td_min.max(td_ttft)), false)
    } else {
        (td_tpot, false)
    };

    let target_ms = if wait_count > 0 {
        let frac = (wait_count as f64 / q_ref.max(1) as f64).min(1.0);
        base + frac * (td_tpot - base)
    } else {
        base
    };
    TargetDecision { target_ms, slo_risk }
}

/// Largest token budget in `[b, m_max]` predicted to finish within `target_ms`.
pub fn binary_search_budget(b: u32, target_ms: f64, params: &PerfParams, cfg: &SchedulerConfig) -> u32 {
    search_budget(b, cfg.m_max, target_ms, params, cfg.n_search_iters)
}

/// Bisection over `[b, s_high]`; returns `b` when nothing is feasible.
fn search_budget(b: u32, s_high: u32, target_ms: f64, params: &PerfParams, iters: u32) -> u32 {
    let mut low = b as i64;
    let mut high = s_high as i64;
    let mut best = b;
    for _ in 0..iters {
        if low > high {
            break;
        }
        let mid = (low + high) / 2;
        let shape = BatchShape::new(b, mid as u32).expect("mid >= b");
        if params.predict_latency(shape) <= target_ms {
            best = mid as u32;
            low = mid + 1;
        } else {
            high = mid - 1;
        }
    }
    best
}

/// Greedy fill: one decode token per running request, then waiting requests
/// in arrival order, each taking as much of its remaining prompt as the
/// budget allows, until `b` slots or `s` tokens run out.
pub fn allocate_tokens(run_q: &[Request], wait_q: &[Request], b: u32, s: u32) -> Vec<Allocation> {
    let mut allocations = Vec::with_capacity(b as usize);
    let mut budget = s;
    for req in run_q.iter().take(b as usize) {
        if budget == 0 {
            break;
        }
        allocations.push(Allocation {
            request_id: req.id,
            tokens: 1,
            kind: AllocationKind::Decode,
        });
        budget -= 1;
    }
    for req in wait_q {
        if allocations.len() as u32 >= b || budget == 0 {
            break;
        }
        let tokens = req.remaining_prompt().min(budget);
        if tokens == 0 {
            continue;
        }
        allocations.push(Allocation {
            request_id: req.id,
            tokens,
            kind: AllocationKind::Prefill,
        });
        budget -= tokens;
    }
    allocations
}

/// Picks the next iteration's batch.
pub fn schedule_step(
    wait_q: &[Request],
    run_q: &[Request],
    slo: &SloSpec,
    tm: &TradeoffModel,
    params: &PerfParams,
    cfg: &SchedulerConfig,
) -> BatchPlan {
    if wait_q.is_empty() && run_q.is_empty() {
        return BatchPlan::default();
    }
    let decision = target_latency(wait_q.len(), slo, tm, cfg.q_ref);
    let target = decision.target_ms;

    if run_q.len() > cfg.q_max as usize {
        let allocations = allocate_tokens(run_q, &[], cfg.q_max, cfg.q_max);
        let mut plan = BatchPlan::from_allocations(allocations);
        plan.refresh(params);
        plan.target_ms = target;
        plan.slo_risk = decision.slo_risk;
        plan.overload = true;
        return plan;
    }

    let n_run = run_q.len() as u32;
    // A batch of only the running requests cannot admit anyone, so with
    // requests waiting the scan starts one above it (work conservation).
    let b_low = if !wait_q.is_empty() && n_run < cfg.q_max {
        n_run + 1
    } else {
        n_run.max(1)
    };
    let b_high = (run_q.len() + wait_q.len()).min(cfg.q_max as usize) as u32;

    let mut best: Option<(Vec<Allocation>, BatchShape, f64)> = None;
    let mut min_error = f64::INFINITY;
    // Tokens the queues can absorb with `b` requests admitted.
    let mut available = n_run as u64;
    let mut admitted = 0usize;

    for b in b_low..=b_high {
        while n_run as usize + admitted < b as usize {
            available += wait_q[admitted].remaining_prompt() as u64;
            admitted += 1;
        }
        let s_high = (cfg.m_max as u64).min(available).max(b as u64) as u32;
        let s = search_budget(b, s_high, target, params, cfg.n_search_iters);
        let allocations = allocate_tokens(run_q, wait_q, b, s);
        let realised = BatchPlan::from_allocations(allocations);
        let Some(shape) = realised.shape() else { continue };
        let predicted = params.predict_latency(shape);
        let error = (predicted - target).abs();
        if error < min_error {
            min_error = error;
            best = Some((realised.allocations, shape, predicted));
            if min_error < target * cfg.eps_ratio {
                break;
            }
        }
    }

    let (allocations, _, predicted) = best.expect("at least one candidate batch size");
    let mut plan = BatchPlan::from_allocations(allocations);
    plan.predicted_ms = predicted;
    plan.target_ms = target;
    plan.slo_risk = decision.slo_risk;
    plan
}

/// One completed request's observed latencies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletedSample {
    pub ttft: f64,
    pub tpot: f64,
    pub decode_len: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TradeoffFlags {
    /// TPOT had (near) zero variance; alpha and beta kept.
    pub degenerate: bool,
    /// TTFT did not fall with TPOT; alpha and beta kept.
    pub no_tradeoff: bool,
    /// beta was raised to [`BETA_MIN`].
    pub beta_clamped: bool,
}

/// Maintains the TTFT/TPOT model from completed requests.
#[derive(Debug, Clone)]
pub struct TradeoffTracker {
    model: TradeoffModel,
    window: VecDeque<(f64, f64)>,
    capacity: usize,
}

impl TradeoffTracker {
    pub fn new(model: TradeoffModel) -> Self {
        Self::with_window(model, TRADEOFF_WINDOW)
    }

    pub fn with_window(model: TradeoffModel, capacity: usize) -> Self {
        TradeoffTracker {
            model,
            window: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
        }
    }

    pub fn model(&self) -> &TradeoffModel {
        &self.model
    }

    /// Folds in completions: `l_bar` follows an EMA of decode lengths, and
    /// `alpha`/`beta` are refit by least squares of TTFT on TPOT over the
    /// sliding window.
    pub fn update(&mut self, completed: &[CompletedSample]) -> TradeoffFlags {
        for c in completed {
            self.model.l_bar += L_BAR_SMOOTHING * (c.decode_len as f64 - self.model.l_bar);
            if self.window.len() == self.capacity {
                self.window.pop_front();
            }
            self.window.push_back((c.tpot, c.ttft));
        }
        self.model.l_bar = self.model.l_bar.max(1.0);

        let mut flags = TradeoffFlags::default();
        if self.window.len() < TRADEOFF_MIN_POINTS {
            flags.degenerate = true;
            return flags;
        }
        let n = self.window.len() as f64;
        let mean_x = self.window.iter().map(|p| p.0).sum::<f64>() / n;
        let mean_y = self.window.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = self.window.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
        let sxy: f64 = self.window.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
        if sxx <= 1e-12 * mean_x.abs().max(1.0).powi(2) * n {
            flags.degenerate = true;
            return flags;
        }
        let slope = sxy / sxx;
        if slope >= 0.0 {
            flags.no_tradeoff = true;
            return flags;
        }
        let mut beta = -slope;
        if beta < BETA_MIN {
            beta = BETA_MIN;
            flags.beta_clamped = true;
        }
        self.model.beta = beta;
        self.model.alpha = mean_y + beta * mean_x;
        flags
    }
}

/// Functional form of [`TradeoffTracker::update`] over a fresh window.
pub fn update_tradeoff(tm: &TradeoffModel, completed: &[CompletedSample]) -> (TradeoffModel, TradeoffFlags) {
    let mut tracker = TradeoffTracker::new(*tm);
    let flags = tracker.update(completed);
    (*tracker.model(), flags)
}
