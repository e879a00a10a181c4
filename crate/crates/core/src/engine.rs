//! Discrete-event model of a single inference engine.
//!
//! An engine owns its waiting and running queues, its KV cache, an online
//! learner for its latency model and the iteration scheduler. Step latency
//! is drawn from a hidden ground-truth model with log-normal noise; the
//! scheduler and router only ever see the learner's estimate.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::kv_cache::KvCache;
use crate::learner::{DueUpdates, LatencySample, LearnerConfig, LearnerState};
use crate::lens::{
    allocate_tokens, schedule_step, Allocation, AllocationKind, BatchPlan, CompletedSample, Request, RequestState,
    SchedulerConfig, SloSpec, TradeoffModel, TradeoffTracker,
};
use crate::perf_model::{BatchShape, PerfParams};
use crate::router::StateVector;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerPolicy {
    #[default]
    Lens,
    PrefillPriority,
    StaticChunked,
}

fn default_noise() -> f64 {
    0.05
}
fn default_block_size() -> u32 {
    16
}
fn default_m_max() -> u32 {
    8192
}
fn default_q_max() -> u32 {
    256
}
fn default_static_budget() -> u32 {
    512
}
fn default_report_period() -> f64 {
    100.0
}
fn default_lambda() -> f64 {
    32.0
}
fn default_l_bar() -> f64 {
    128.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub engine_id: u32,
    /// Ground truth, hidden from the scheduler and learner.
    pub true_params: PerfParams,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    pub kv_blocks: u32,
    #[serde(default = "default_block_size")]
    pub block_size: u32,
    #[serde(default = "default_m_max")]
    pub m_max: u32,
    #[serde(default = "default_q_max")]
    pub q_max: u32,
    #[serde(default)]
    pub scheduler_policy: SchedulerPolicy,
    #[serde(default = "default_static_budget")]
    pub static_budget: u32,
    #[serde(default = "default_report_period")]
    pub state_report_period: f64,
    #[serde(default)]
    pub state_staleness: f64,
    /// Waiting-queue cap; `None` is unbounded.
    #[serde(default)]
    pub wait_cap: Option<usize>,
    /// Weight of one queued request in the pending-workload signal (tokens).
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Initial expected decode length.
    #[serde(default = "default_l_bar")]
    pub initial_l_bar: f64,
    /// Starting latency model; `None` starts from the zero-config prior.
    #[serde(default)]
    pub initial_params: Option<PerfParams>,
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), String> {
        let id = self.engine_id;
        self.true_params
            .validate()
            .map_err(|e| format!("engine {id}: true_params: {e}"))?;
        if let Some(p) = &self.initial_params {
            p.validate().map_err(|e| format!("engine {id}: initial_params: {e}"))?;
        }
        if self.kv_blocks == 0 || self.block_size == 0 {
            return Err(format!("engine {id}: kv_blocks and block_size must be > 0"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(format!("engine {id}: noise_sigma must be >= 0"));
        }
        if self.q_max < 1 || self.m_max < self.q_max {
            return Err(format!("engine {id}: need m_max >= q_max >= 1"));
        }
        if self.static_budget == 0 || self.static_budget > self.m_max {
            return Err(format!("engine {id}: static_budget must be in [1, m_max]"));
        }
        if !(self.state_report_period > 0.0) || !(self.state_staleness >= 0.0) {
            return Err(format!("engine {id}: report period must be > 0 and staleness >= 0"));
        }
        if !(self.lambda >= 0.0) || !(self.initial_l_bar >= 1.0) {
            return Err(format!("engine {id}: lambda must be >= 0 and initial_l_bar >= 1"));
        }
        Ok(())
    }
}

/// Ground-truth step latency with multiplicative log-normal noise.
pub fn oracle_latency(cfg: &EngineConfig, shape: BatchShape, rng: &mut ChaCha8Rng) -> f64 {
    let base = cfg.true_params.predict_latency(shape);
    if cfg.noise_sigma == 0.0 {
        return base;
    }
    let z: f64 = StandardNormal.sample(rng);
    base * (cfg.noise_sigma * z).exp()
}

/// Non-adaptive engine policies.
pub fn schedule_baseline(
    policy: SchedulerPolicy,
    wait_q: &[Request],
    run_q: &[Request],
    m_max: u32,
    q_max: u32,
    static_budget: u32,
) -> BatchPlan {
    match policy {
        SchedulerPolicy::PrefillPriority => {
            // Prefills may only fill the slots running requests leave free.
            let slots = (q_max as usize).saturating_sub(run_q.len());
            if wait_q.is_empty() || slots == 0 {
                let n = run_q.len().min(q_max as usize) as u32;
                return BatchPlan::from_allocations(allocate_tokens(run_q, &[], n, n));
            }
            let mut allocations = Vec::new();
            let mut tokens = 0u32;
            for req in wait_q {
                if allocations.len() >= slots {
                    break;
                }
                let need = req.remaining_prompt();
                if tokens + need > m_max {
                    // A prompt longer than the whole cap is chunked; otherwise
                    // it waits for the next iteration.
                    if allocations.is_empty() {
                        allocations.push(Allocation {
                            request_id: req.id,
                            tokens: m_max,
                            kind: AllocationKind::Prefill,
                        });
                    }
                    break;
                }
                tokens += need;
                allocations.push(Allocation {
                    request_id: req.id,
                    tokens: need,
                    kind: AllocationKind::Prefill,
                });
            }
            BatchPlan::from_allocations(allocations)
        }
        SchedulerPolicy::StaticChunked => {
            if wait_q.is_empty() && run_q.is_empty() {
                return BatchPlan::default();
            }
            let b = (run_q.len() + wait_q.len()).min(q_max as usize) as u32;
            let decodes = run_q.len().min(q_max as usize) as u32;
            let s = static_budget.max(decodes).min(m_max);
            BatchPlan::from_allocations(allocate_tokens(run_q, wait_q, b, s))
        }
        SchedulerPolicy::Lens => unreachable!("LENS is scheduled through schedule_step"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinishedRequest {
    pub request: Request,
    pub completed_at: f64,
}

/// Result of one executed iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub plan: BatchPlan,
    pub actual_ms: f64,
    pub finished: Vec<FinishedRequest>,
    pub first_tokens: Vec<u64>,
    pub learner_due: DueUpdates,
}

#[derive(Debug, Clone)]
struct InFlight {
    plan: BatchPlan,
    started_at: f64,
    actual_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdmitError {
    QueueFull,
    /// The request's footprint exceeds the engine's whole KV capacity.
    TooLarge,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineStats {
    pub steps: u64,
    pub trimmed_admissions: u64,
    pub slo_risk_steps: u64,
    pub overload_steps: u64,
    pub prefix_hits: u64,
    pub prefix_tokens_reused: u64,
    /// LENS steps planned with an exploration budget while the learner was stalled and inaccurate.
    pub exploration_steps: u64,
}

pub struct Engine {
    cfg: EngineConfig,
    sched: SchedulerConfig,
    slo: SloSpec,
    learner: LearnerState,
    tradeoff: TradeoffTracker,
    wait_q: Vec<Request>,
    run_q: Vec<Request>,
    kv: KvCache,
    rng: ChaCha8Rng,
    in_flight: Option<InFlight>,
    stats: EngineStats,
    /// Per-request (credited, prefill, decode) token tallies, kept in strict mode.
    ledger: Option<HashMap<u64, [u32; 3]>>,
}

impl Engine {
    pub fn new(
        cfg: EngineConfig,
        sched: &SchedulerConfig,
        slo: SloSpec,
        learner: LearnerConfig,
        rng: ChaCha8Rng,
    ) -> Self {
        let sched = SchedulerConfig {
            m_max: cfg.m_max,
            q_max: cfg.q_max,
            ..*sched
        };
        let initial = cfg.initial_params.unwrap_or(PerfParams::ZERO_CONFIG_PRIOR);
        let tradeoff = TradeoffTracker::new(TradeoffModel::initial(&slo, cfg.initial_l_bar, sched.td_min));
        Engine {
            kv: KvCache::new(cfg.kv_blocks, cfg.block_size),
            learner: LearnerState::new(learner, initial),
            tradeoff,
            sched,
            slo,
            wait_q: Vec::new(),
            run_q: Vec::new(),
            rng,
            in_flight: None,
            stats: EngineStats::default(),
            ledger: None,
            cfg,
        }
    }

    /// Convenience constructor with a seed instead of a prepared stream.
    pub fn with_seed(
        cfg: EngineConfig,
        sched: &SchedulerConfig,
        slo: SloSpec,
        learner: LearnerConfig,
        seed: u64,
    ) -> Self {
        Self::new(cfg, sched, slo, learner, ChaCha8Rng::seed_from_u64(seed))
    }

    /// Enables per-step invariant checking.
    pub fn set_strict(&mut self, strict: bool) {
        self.ledger = strict.then(HashMap::new);
    }

    pub fn id(&self) -> u32 {
        self.cfg.engine_id
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn learner(&self) -> &LearnerState {
        &self.learner
    }

    pub fn learner_mut(&mut self) -> &mut LearnerState {
        &mut self.learner
    }

    pub fn tradeoff(&self) -> &TradeoffModel {
        self.tradeoff.model()
    }

    pub fn kv(&self) -> &KvCache {
        &self.kv
    }

    pub fn wait_queue(&self) -> &[Request] {
        &self.wait_q
    }

    pub fn run_queue(&self) -> &[Request] {
        &self.run_q
    }

    pub fn stats(&self) -> EngineStats {
        self.stats
    }

    pub fn is_busy(&self) -> bool {
        self.in_flight.is_some()
    }

    pub fn has_work(&self) -> bool {
        !self.wait_q.is_empty() || !self.run_q.is_empty()
    }

    /// Queues a request; a resident prefix of the same session is credited.
    /// Returns the credited prefix length.
    pub fn admit(&mut self, mut req: Request) -> Result<u32, AdmitError> {
        if self.cfg.wait_cap.is_some_and(|cap| self.wait_q.len() >= cap) {
            return Err(AdmitError::QueueFull);
        }
        if self.kv.blocks_for(req.prompt_len + req.target_decode) > self.kv.kv_blocks() {
            return Err(AdmitError::TooLarge);
        }
        req.state = RequestState::Waiting;
        // At least one prompt token is always recomputed to produce the first output.
        let credit = self
            .kv
            .claim_prefix(req.session_id, req.id, req.prompt_len.saturating_sub(1));
        if credit > 0 {
            self.stats.prefix_hits += 1;
            self.stats.prefix_tokens_reused += credit as u64;
        }
        req.prefilled = credit;
        if let Some(ledger) = &mut self.ledger {
            ledger.insert(req.id, [credit, 0, 0]);
        }
        self.wait_q.push(req);
        Ok(credit)
    }

    /// Returns credited prefixes of never-scheduled waiting requests to the
    /// pool. Used when those blocks are all that stand between the queue
    /// head and admission.
    fn drop_uncommitted_credit(&mut self) -> bool {
        let mut dropped = false;
        for req in &mut self.wait_q {
            if req.prefilled > 0 && !self.kv.is_committed(req.id) {
                self.kv.release(req.id);
                req.prefilled = 0;
                if let Some(entry) = self.ledger.as_mut().and_then(|l| l.get_mut(&req.id)) {
                    entry[0] = 0;
                }
                dropped = true;
            }
        }
        dropped
    }

    /// Chunked plan whose token budget walks a doubling ladder, so a stalled
    /// learner sees varied batch shapes.
    fn exploration_plan(&self, params: &PerfParams) -> BatchPlan {
        let rungs = (self.sched.m_max.max(16) / 16).ilog2() + 1;
        let budget = 16u32 << (self.stats.steps % rungs as u64);
        let mut plan = schedule_baseline(
            SchedulerPolicy::StaticChunked,
            &self.wait_q,
            &self.run_q,
            self.sched.m_max,
            self.sched.q_max,
            budget.min(self.sched.m_max),
        );
        plan.refresh(params);
        plan
    }

    fn plan(&self) -> BatchPlan {
        let params = self.learner.params();
        match self.cfg.scheduler_policy {
            SchedulerPolicy::Lens if self.learner.needs_exploration() => self.exploration_plan(&params),
            SchedulerPolicy::Lens => schedule_step(
                &self.wait_q,
                &self.run_q,
                &self.slo,
                self.tradeoff.model(),
                &params,
                &self.sched,
            ),
            policy => {
                let mut plan = schedule_baseline(
                    policy,
                    &self.wait_q,
                    &self.run_q,
                    self.sched.m_max,
                    self.sched.q_max,
                    self.cfg.static_budget,
                );
                plan.refresh(&params);
                plan
            }
        }
    }

    /// Plans and launches one iteration. Returns the drawn latency, or `None`
    /// when there is nothing to run.
    pub fn begin_step(&mut self, now: f64) -> Result<Option<f64>, String> {
        if self.in_flight.is_some() {
            return Err(format!("engine {} already has a step in flight", self.id()));
        }
        let mut plan = self.checked_plan()?;
        if plan.is_empty() && self.run_q.is_empty() && self.drop_uncommitted_credit() {
            plan = self.checked_plan()?;
        }
        if plan.is_empty() {
            return Ok(None);
        }

        self.stats.exploration_steps +=
            (self.cfg.scheduler_policy == SchedulerPolicy::Lens && self.learner.needs_exploration()) as u64;
        self.stats.steps += 1;
        self.stats.slo_risk_steps += plan.slo_risk as u64;
        self.stats.overload_steps += plan.overload as u64;

        let shape = plan
            .shape()
            .ok_or_else(|| format!("engine {}: empty shape", self.id()))?;
        let actual_ms = oracle_latency(&self.cfg, shape, &mut self.rng);
        self.in_flight = Some(InFlight {
            plan,
            started_at: now,
            actual_ms,
        });
        Ok(Some(actual_ms))
    }

    fn checked_plan(&mut self) -> Result<BatchPlan, String> {
        let mut plan = self.plan();
        if plan.is_empty() {
            return Ok(plan);
        }
        plan.check(&self.run_q, &self.wait_q, self.sched.m_max, self.sched.q_max)
            .map_err(|e| format!("engine {}: {e}", self.id()))?;
        // prefill_priority pauses decodes by design while requests wait.
        let continuous = self.cfg.scheduler_policy != SchedulerPolicy::PrefillPriority;
        if self.ledger.is_some() && continuous && self.run_q.len() <= self.sched.q_max as usize {
            let decodes = plan
                .allocations
                .iter()
                .filter(|a| a.kind == AllocationKind::Decode)
                .count();
            if decodes != self.run_q.len() {
                return Err(format!(
                    "engine {}: plan decodes {decodes} of {} running requests",
                    self.id(),
                    self.run_q.len()
                ));
            }
        }
        if self.reserve_kv(&mut plan)? {
            if plan.is_empty() && !self.run_q.is_empty() {
                // Every admission was trimmed: keep the running requests going.
                let n = self.run_q.len().min(self.sched.q_max as usize) as u32;
                plan.allocations = allocate_tokens(&self.run_q, &[], n, n);
                for a in &plan.allocations {
                    let req = self.run_q.iter().find(|r| r.id == a.request_id).expect("running");
                    self.kv.grow(req.id, req.prefilled + req.decoded + 1)?;
                }
            }
            plan.refresh(&self.learner.params());
        }
        Ok(plan)
    }

    /// Grows KV for every allocation; admissions that memory cannot cover are
    /// dropped from the plan together with every later admission. Returns
    /// whether the plan changed.
    fn reserve_kv(&mut self, plan: &mut BatchPlan) -> Result<bool, String> {
        let mut keep = Vec::with_capacity(plan.allocations.len());
        let mut blocked = false;
        for alloc in &plan.allocations {
            match alloc.kind {
                AllocationKind::Decode => {
                    let req = self
                        .run_q
                        .iter()
                        .find(|r| r.id == alloc.request_id)
                        .ok_or("decode for missing request")?;
                    self.kv.grow(req.id, req.prefilled + req.decoded + 1)?;
                    keep.push(*alloc);
                }
                AllocationKind::Prefill => {
                    let req = self
                        .wait_q
                        .iter()
                        .find(|r| r.id == alloc.request_id)
                        .ok_or("prefill for missing request")?;
                    if !self.kv.is_committed(req.id)
                        && (blocked || !self.kv.commit(req.id, req.prompt_len + req.target_decode))
                    {
                        blocked = true;
                        self.stats.trimmed_admissions += 1;
                        continue;
                    }
                    let completes = req.prefilled + alloc.tokens == req.prompt_len;
                    let total = req.prefilled + alloc.tokens + completes as u32;
                    self.kv.grow(req.id, total)?;
                    keep.push(*alloc);
                }
            }
        }
        let changed = keep.len() != plan.allocations.len();
        plan.allocations = keep;
        Ok(changed)
    }

    /// Applies the in-flight iteration's effects at its completion time.
    pub fn complete_step(&mut self, now: f64) -> Result<StepOutcome, String> {
        let flight = self
            .in_flight
            .take()
            .ok_or_else(|| format!("engine {} has no step in flight", self.id()))?;
        let mut finished = Vec::new();
        let mut first_tokens = Vec::new();

        for alloc in &flight.plan.allocations {
            if let Some(entry) = self.ledger.as_mut().and_then(|l| l.get_mut(&alloc.request_id)) {
                entry[1 + (alloc.kind == AllocationKind::Decode) as usize] += alloc.tokens;
            }
            match alloc.kind {
                AllocationKind::Decode => {
                    let req = self
                        .run_q
                        .iter_mut()
                        .find(|r| r.id == alloc.request_id)
                        .ok_or("decode for missing request")?;
                    req.decoded += 1;
                }
                AllocationKind::Prefill => {
                    let idx = self
                        .wait_q
                        .iter()
                        .position(|r| r.id == alloc.request_id)
                        .ok_or("prefill for missing request")?;
                    let req = &mut self.wait_q[idx];
                    req.prefilled += alloc.tokens;
                    if req.prefilled == req.prompt_len {
                        let mut req = self.wait_q.remove(idx);
                        req.first_token_at = Some(now);
                        req.decoded = 1;
                        req.state = RequestState::Running;
                        first_tokens.push(req.id);
                        self.run_q.push(req);
                    }
                }
            }
        }

        let mut done = Vec::new();
        self.run_q.retain(|r| {
            if r.decoded >= r.target_decode {
                done.push(r.clone());
                false
            } else {
                true
            }
        });
        let mut completed = Vec::new();
        for mut req in done {
            req.state = RequestState::Finished;
            if let Some(ledger) = &mut self.ledger {
                let [credit, prefill, decode] = ledger.remove(&req.id).unwrap_or_default();
                if credit + prefill != req.prompt_len || decode + 1 != req.target_decode {
                    return Err(format!(
                        "request {} lost tokens: credit {credit} + prefill {prefill} vs prompt {}, decode {decode} + 1 vs {}",
                        req.id, req.prompt_len, req.target_decode
                    ));
                }
            }
            self.kv
                .release_to_prefix(req.id, req.session_id, req.prompt_len + req.decoded);
            if req.target_decode >= 2 {
                let first = req.first_token_at.unwrap_or(now);
                completed.push(CompletedSample {
                    ttft: first - req.arrival,
                    tpot: (now - first) / (req.target_decode - 1) as f64,
                    decode_len: req.target_decode,
                });
            }
            finished.push(FinishedRequest {
                request: req,
                completed_at: now,
            });
        }
        if !completed.is_empty() {
            self.tradeoff.update(&completed);
        }

        let shape = flight.plan.shape().ok_or("empty shape")?;
        let due = self
            .learner
            .push_sample(LatencySample::new(shape, flight.actual_ms, now));

        if self.ledger.is_some() {
            self.check_invariants()?;
        }
        Ok(StepOutcome {
            plan: flight.plan,
            actual_ms: flight.actual_ms,
            finished,
            first_tokens,
            learner_due: due,
        })
    }

    /// Runs one full iteration synchronously: plan, execute, complete.
    pub fn step(&mut self, now: f64) -> Result<Option<StepOutcome>, String> {
        match self.begin_step(now)? {
            Some(ms) => self.complete_step(now + ms).map(Some),
            None => Ok(None),
        }
    }

    /// Forward-looking state exported to the router.
    pub fn export_state(&self, now: f64) -> StateVector {
        let l_hat = self
            .in_flight
            .as_ref()
            .map_or(0.0, |f| (f.plan.predicted_ms - (now - f.started_at)).max(0.0));
        let pending_prefill: f64 = self.wait_q.iter().map(|r| r.remaining_prompt() as f64).sum();
        let queued = (self.run_q.len() + self.wait_q.len()) as f64;
        let l_bar = self.tradeoff.model().l_bar;
        let queued_demand: f64 = self.wait_q.iter().map(|r| r.remaining_prompt() as f64 + l_bar).sum();
        let free_tokens = (self.kv.free_blocks() + self.kv.evictable_blocks()) as f64 * self.kv.block_size() as f64;
        StateVector {
            engine_id: self.id(),
            l_hat,
            w_load: pending_prefill + self.cfg.lambda * queued,
            m_free: (free_tokens - queued_demand).max(0.0),
            p_max: self.learner.params().effective_token_rate(),
            queue_len: (self.run_q.len() + self.wait_q.len()) as u32,
            reported_at: now,
        }
    }

    /// Cross-checks KV accounting against the queues.
    pub fn check_invariants(&self) -> Result<(), String> {
        self.kv.check()?;
        for req in self.run_q.iter().chain(self.wait_q.iter()) {
            let tokens = req.prefilled + req.decoded;
            let blocks = self.kv.request_blocks(req.id);
            if blocks != self.kv.blocks_for(tokens) {
                return Err(format!("request {} holds {blocks} blocks for {tokens} tokens", req.id));
            }
            if req.prefilled > req.prompt_len || req.decoded > req.target_decode {
                return Err(format!("request {} progress out of range", req.id));
            }
        }
        Ok(())
    }
}
