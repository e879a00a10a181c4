//! Cluster-level request routing.
//!
//! PRISM scores every engine with a product of four factors computed from
//! the engine's exported state: latency headroom, normalised load, memory
//! capacity and session affinity. Baseline policies share the same state
//! table and dispatch bookkeeping.

use std::collections::{BTreeMap, VecDeque};
use std::num::NonZeroUsize;

use lru::LruCache;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::RouteError;
use crate::lens::{SloSpec, L_BAR_SMOOTHING};

pub const SESSION_TABLE_CAPACITY: usize = 100_000;

/// Forward-looking engine state as seen by the router.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub engine_id: u32,
    /// Remaining predicted time of the in-flight step (ms).
    pub l_hat: f64,
    /// Pending workload (tokens).
    pub w_load: f64,
    /// Free KV tokens net of queued demand.
    pub m_free: f64,
    /// Effective token rate (tokens per ms) at a reference batch shape.
    pub p_max: f64,
    /// Requests queued or running.
    pub queue_len: u32,
    pub reported_at: f64,
}

impl StateVector {
    pub fn validate(&self) -> Result<(), String> {
        let fields = [self.l_hat, self.w_load, self.m_free, self.reported_at];
        if fields.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || !(self.p_max > 0.0 && self.p_max.is_finite()) {
            return Err(format!("engine {}: invalid state vector", self.engine_id));
        }
        Ok(())
    }

    /// Backlog in ms of work at peak rate.
    pub fn rho(&self) -> f64 {
        self.w_load / self.p_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterPolicy {
    Prism,
    RoundRobin,
    SessionAffinity,
    LeastLoaded,
    LatencyBased,
    Weighted,
}

fn default_weights() -> [f64; 4] {
    [1.0; 4]
}
fn default_beta_aff() -> f64 {
    1.5
}
fn default_knee() -> f64 {
    0.5
}
fn default_load_half() -> f64 {
    50.0
}
fn default_headroom() -> f64 {
    2.0
}
fn default_staleness_limit() -> f64 {
    1000.0
}
fn default_latency_window() -> f64 {
    2000.0
}
fn default_lambda() -> f64 {
    32.0
}
fn default_l_bar() -> f64 {
    128.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub policy: RouterPolicy,
    /// Exponents of the latency, load, capacity and affinity factors.
    #[serde(default = "default_weights")]
    pub weights: [f64; 4],
    #[serde(default = "default_beta_aff")]
    pub beta_aff: f64,
    /// Fraction of the TTFT bound below which latency is not penalised.
    #[serde(default = "default_knee")]
    pub latency_knee: f64,
    /// Decay scale past the knee (ms); `None` means a quarter of the TTFT bound.
    #[serde(default)]
    pub latency_scale: Option<f64>,
    /// Backlog (ms at peak rate) at which the load factor is one half.
    #[serde(default = "default_load_half")]
    pub load_half: f64,
    #[serde(default = "default_headroom")]
    pub capacity_headroom: f64,
    #[serde(default = "default_staleness_limit")]
    pub staleness_limit: f64,
    #[serde(default = "default_latency_window")]
    pub latency_window: f64,
    #[serde(default)]
    pub static_weights: BTreeMap<u32, f64>,
    /// Per-request weight used when accounting dispatches between reports.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Initial expected decode length for capacity demand.
    #[serde(default = "default_l_bar")]
    pub initial_l_bar: f64,
}

impl RouterConfig {
    pub fn new(policy: RouterPolicy) -> Self {
        RouterConfig {
            policy,
            weights: default_weights(),
            beta_aff: default_beta_aff(),
            latency_knee: default_knee(),
            latency_scale: None,
            load_half: default_load_half(),
            capacity_headroom: default_headroom(),
            staleness_limit: default_staleness_limit(),
            latency_window: default_latency_window(),
            static_weights: BTreeMap::new(),
            lambda: default_lambda(),
            initial_l_bar: default_l_bar(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.beta_aff > 1.0) {
            return Err("router: beta_aff must be > 1".into());
        }
        if self.weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err("router: weights must be >= 0".into());
        }
        if !(self.staleness_limit > 0.0) {
            return Err("router: staleness_limit must be > 0".into());
        }
        if !(self.latency_knee >= 0.0) || self.latency_scale.is_some_and(|s| !(s > 0.0)) {
            return Err("router: latency_knee must be >= 0 and latency_scale > 0".into());
        }
        if !(self.load_half > 0.0) || !(self.capacity_headroom >= 1.0) {
            return Err("router: load_half must be > 0 and capacity_headroom >= 1".into());
        }
        if !(self.latency_window > 0.0) || !(self.lambda >= 0.0) || !(self.initial_l_bar >= 1.0) {
            return Err("router: latency_window > 0, lambda >= 0, initial_l_bar >= 1 required".into());
        }
        if self.static_weights.values().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err("router: static_weights must be >= 0".into());
        }
        Ok(())
    }

    fn scale(&self, slo: &SloSpec) -> f64 {
        self.latency_scale.unwrap_or(0.25 * slo.ttft_slo)
    }
}

/// 1 up to the knee, then exponential decay.
pub fn score_latency(sv: &StateVector, slo: &SloSpec, cfg: &RouterConfig) -> f64 {
    let knee = cfg.latency_knee * slo.ttft_slo;
    if sv.l_hat <= knee {
        1.0
    } else {
        (-(sv.l_hat - knee) / cfg.scale(slo)).exp()
    }
}

/// Hyperbolic penalty on backlog normalised by peak throughput.
pub fn score_load(sv: &StateVector, cfg: &RouterConfig) -> f64 {
    1.0 / (1.0 + sv.rho() / cfg.load_half)
}

/// Squared headroom ratio, clamped to [0, 1].
pub fn score_capacity(sv: &StateVector, req_demand: f64, cfg: &RouterConfig) -> f64 {
    let r = sv.m_free / (cfg.capacity_headroom * req_demand.max(1.0));
    r.clamp(0.0, 1.0).powi(2)
}

/// `beta_aff` when the session was last served by this engine.
pub fn score_affinity(engine_id: u32, session_id: u64, table: &LruCache<u64, u32>, cfg: &RouterConfig) -> f64 {
    match table.peek(&session_id) {
        Some(&e) if e == engine_id => cfg.beta_aff,
        _ => 1.0,
    }
}

/// Weighted product of the four factors.
pub fn combine(factors: [f64; 4], weights: [f64; 4]) -> f64 {
    factors
        .iter()
        .zip(weights)
        .map(|(s, w)| if w == 0.0 { 1.0 } else { s.powf(w) })
        .product()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EngineScore {
    pub engine_id: u32,
    pub factors: [f64; 4],
    pub score: f64,
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RouteDecision {
    pub engine_id: u32,
    /// Per-engine factors, populated for PRISM only.
    pub scores: Vec<EngineScore>,
    pub all_stale: bool,
}

#[derive(Debug, Clone, Copy)]
struct Dispatch {
    at: f64,
    w_load: f64,
    m_demand: f64,
}

pub struct Router {
    cfg: RouterConfig,
    slo: SloSpec,
    engines: Vec<u32>,
    states: BTreeMap<u32, StateVector>,
    pending: BTreeMap<u32, Vec<Dispatch>>,
    sessions: LruCache<u64, u32>,
    latencies: BTreeMap<u32, VecDeque<(f64, f64)>>,
    l_bar: f64,
    rr_next: usize,
    rng: ChaCha8Rng,
}

impl Router {
    pub fn new(cfg: RouterConfig, slo: SloSpec, engines: &[u32], rng: ChaCha8Rng) -> Result<Self, RouteError> {
        if engines.is_empty() {
            return Err(RouteError::NoEngines);
        }
        let mut ids = engines.to_vec();
        ids.sort_unstable();
        ids.dedup();
        Ok(Router {
            l_bar: cfg.initial_l_bar,
            cfg,
            slo,
            pending: ids.iter().map(|&e| (e, Vec::new())).collect(),
            latencies: ids.iter().map(|&e| (e, VecDeque::new())).collect(),
            engines: ids,
            states: BTreeMap::new(),
            sessions: LruCache::new(NonZeroUsize::new(SESSION_TABLE_CAPACITY).expect("nonzero")),
            rr_next: 0,
            rng,
        })
    }

    pub fn config(&self) -> &RouterConfig {
        &self.cfg
    }

    pub fn l_bar(&self) -> f64 {
        self.l_bar
    }

    pub fn sessions(&self) -> &LruCache<u64, u32> {
        &self.sessions
    }

    /// Replaces an engine's state entry with a newly delivered report.
    pub fn update_state(&mut self, sv: StateVector) {
        if let Some(pending) = self.pending.get_mut(&sv.engine_id) {
            pending.retain(|d| d.at > sv.reported_at);
        }
        self.states.insert(sv.engine_id, sv);
    }

    /// Reported state plus dispatches made since that report was taken.
    pub fn effective_state(&self, engine_id: u32) -> Option<StateVector> {
        let mut sv = *self.states.get(&engine_id)?;
        for d in self.pending.get(&engine_id).into_iter().flatten() {
            sv.w_load += d.w_load;
            sv.m_free = (sv.m_free - d.m_demand).max(0.0);
            sv.queue_len += 1;
        }
        Some(sv)
    }

    /// Records a completed request: decode-length estimate, engine latency
    /// history and the session's serving engine.
    pub fn on_complete(&mut self, engine_id: u32, session_id: u64, output_tokens: u32, e2e_ms: f64, now: f64) {
        self.l_bar += L_BAR_SMOOTHING * (output_tokens as f64 - self.l_bar);
        if let Some(hist) = self.latencies.get_mut(&engine_id) {
            hist.push_back((now, e2e_ms));
        }
        self.sessions.put(session_id, engine_id);
    }

    fn avg_latency(&mut self, engine_id: u32, now: f64) -> f64 {
        let window = self.cfg.latency_window;
        let hist = self.latencies.get_mut(&engine_id).expect("registered engine");
        while hist.front().is_some_and(|(t, _)| now - t > window) {
            hist.pop_front();
        }
        if hist.is_empty() {
            0.0
        } else {
            hist.iter().map(|(_, l)| l).sum::<f64>() / hist.len() as f64
        }
    }

    fn round_robin(&mut self) -> u32 {
        let e = self.engines[self.rr_next % self.engines.len()];
        self.rr_next = (self.rr_next + 1) % self.engines.len();
        e
    }

    fn queue_len(&self, engine_id: u32) -> u32 {
        self.effective_state(engine_id).map_or(0, |s| s.queue_len)
    }

    fn least_loaded(&self) -> u32 {
        *self
            .engines
            .iter()
            .min_by_key(|&&e| (self.queue_len(e), e))
            .expect("nonempty")
    }

    /// PRISM scores for every engine at `now`.
    pub fn score_engines(&self, session_id: u64, prompt_len: u32, now: f64) -> Vec<EngineScore> {
        let demand = prompt_len as f64 + self.l_bar;
        self.engines
            .iter()
            .map(|&e| {
                let affinity = score_affinity(e, session_id, &self.sessions, &self.cfg);
                let Some(sv) = self.effective_state(e) else {
                    // Never reported: neutral latency and capacity, unknown load.
                    let factors = [0.5, 1.0, 0.5, affinity];
                    return EngineScore {
                        engine_id: e,
                        factors,
                        score: combine(factors, self.cfg.weights),
                        stale: true,
                    };
                };
                let age = now - sv.reported_at;
                let (factors, stale) = if age > self.cfg.staleness_limit {
                    let decay = (-(age - self.cfg.staleness_limit) / self.cfg.staleness_limit).exp();
                    let load = 1.0 - (1.0 - score_load(&sv, &self.cfg)) * decay;
                    ([0.5, load, 0.5, affinity], true)
                } else {
                    (
                        [
                            score_latency(&sv, &self.slo, &self.cfg),
                            score_load(&sv, &self.cfg),
                            score_capacity(&sv, demand, &self.cfg),
                            affinity,
                        ],
                        false,
                    )
                };
                EngineScore {
                    engine_id: e,
                    factors,
                    score: combine(factors, self.cfg.weights),
                    stale,
                }
            })
            .collect()
    }

    fn prism(&self, session_id: u64, prompt_len: u32, now: f64) -> (u32, Vec<EngineScore>, bool) {
        let scores = self.score_engines(session_id, prompt_len, now);
        if scores.iter().all(|s| s.stale) {
            return (self.least_loaded(), scores, true);
        }
        let rho = |e: u32| self.effective_state(e).map_or(f64::INFINITY, |s| s.rho());
        let best = scores
            .iter()
            .max_by(|a, b| {
                a.score
                    .total_cmp(&b.score)
                    .then_with(|| rho(b.engine_id).total_cmp(&rho(a.engine_id)))
                    .then_with(|| b.engine_id.cmp(&a.engine_id))
            })
            .expect("nonempty");
        (best.engine_id, scores, false)
    }

    /// Chooses an engine for a request and books the dispatch.
    pub fn route(&mut self, session_id: u64, prompt_len: u32, now: f64) -> RouteDecision {
        let mut scores = Vec::new();
        let mut all_stale = false;
        let engine_id = match self.cfg.policy {
            RouterPolicy::Prism => {
                let (e, s, stale) = self.prism(session_id, prompt_len, now);
                scores = s;
                all_stale = stale;
                e
            }
            RouterPolicy::RoundRobin => self.round_robin(),
            RouterPolicy::SessionAffinity => match self.sessions.get(&session_id) {
                Some(&e) => e,
                None => {
                    let e = self.round_robin();
                    self.sessions.put(session_id, e);
                    e
                }
            },
            RouterPolicy::LeastLoaded => self.least_loaded(),
            RouterPolicy::LatencyBased => {
                let engines = self.engines.clone();
                let avgs: Vec<f64> = engines.iter().map(|&e| self.avg_latency(e, now)).collect();
                let best = avgs.iter().copied().fold(f64::INFINITY, f64::min);
                let ties: Vec<u32> = engines
                    .iter()
                    .zip(&avgs)
                    .filter(|(_, a)| **a == best)
                    .map(|(e, _)| *e)
                    .collect();
                let e = ties[self.rr_next % ties.len()];
                self.rr_next = (self.rr_next + 1) % self.engines.len();
                e
            }
            RouterPolicy::Weighted => self.weighted(),
        };
        if let Some(p) = self.pending.get_mut(&engine_id) {
            p.push(Dispatch {
                at: now,
                w_load: prompt_len as f64 + self.cfg.lambda,
                m_demand: prompt_len as f64 + self.l_bar,
            });
        }
        RouteDecision {
            engine_id,
            scores,
            all_stale,
        }
    }

    fn weighted(&mut self) -> u32 {
        let weights: Vec<f64> = self
            .engines
            .iter()
            .map(|e| {
                if self.cfg.static_weights.is_empty() {
                    1.0
                } else {
                    self.cfg.static_weights.get(e).copied().unwrap_or(0.0)
                }
            })
            .collect();
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return self.round_robin();
        }
        let mut x = self.rng.random::<f64>() * total;
        for (e, w) in self.engines.iter().zip(&weights) {
            if x < *w {
                return *e;
            }
            x -= w;
        }
        *self
            .engines
            .iter()
            .zip(&weights)
            .rev()
            .find(|(_, w)| **w > 0.0)
            .expect("positive total")
            .0
    }
}
