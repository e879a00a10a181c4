//! Deterministic global event loop and experiment orchestration.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{AdmitError, Engine, EngineConfig, EngineStats, SchedulerPolicy};
use crate::error::{SimError, WorkloadError};
use crate::learner::{DueUpdates, LearnerConfig, LearnerCounters};
use crate::lens::{Request, SchedulerConfig, SloSpec, TradeoffModel};
use crate::metrics::{summarize, write_requests_csv, MetricsSummary, RequestRecord, SummaryInput};
use crate::perf_model::PerfParams;
use crate::presets;
use crate::router::{EngineScore, Router, RouterConfig, RouterPolicy, StateVector};
use crate::workload::{assign_arrivals_with, load_trace, synth_generate_with, ArrivalMode, ScenarioStats, TraceRecord};

const WORKLOAD_STREAM: u64 = 1;
const ROUTER_STREAM: u64 = 2;
const ENGINE_STREAM_BASE: u64 = 100;

/// Deterministic substream `stream` of the run seed.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    /// Built-in scenario name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    /// Inline scenario statistics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<ScenarioStats>,
    /// JSONL trace path; relative paths resolve against the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    /// Number of requests (synthetic), or a cap on trace length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    pub arrival: ArrivalMode,
}

impl WorkloadSpec {
    fn validate(&self) -> Result<(), String> {
        let sources = self.scenario.is_some() as u8 + self.stats.is_some() as u8 + self.trace.is_some() as u8;
        if sources != 1 {
            return Err("workload: set exactly one of scenario, stats, trace".into());
        }
        if self.trace.is_none() && self.n.unwrap_or(0) == 0 {
            return Err("workload: synthetic workloads need n >= 1".into());
        }
        if let Some(name) = &self.scenario {
            if presets::scenario(name).is_none() {
                return Err(format!("workload: unknown scenario {name:?}"));
            }
        }
        if let Some(stats) = &self.stats {
            stats.validate().map_err(|e| e.to_string())?;
        }
        if self.trace.is_some() && matches!(self.arrival, ArrivalMode::Qps { .. }) && self.n == Some(0) {
            return Err("workload: n must be >= 1".into());
        }
        match self.arrival {
            ArrivalMode::Qps { rate, .. } if !(rate > 0.0 && rate.is_finite()) => {
                Err("workload: qps rate must be > 0".into())
            }
            ArrivalMode::Timestamp { scale } if !(scale > 0.0) => Err("workload: timestamp scale must be > 0".into()),
            ArrivalMode::Timestamp { .. } if self.trace.is_none() => {
                Err("workload: timestamp mode needs a trace with arrivals".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LogConfig {
    #[serde(default)]
    pub plans: bool,
    #[serde(default)]
    pub routing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub duration_ms: f64,
    pub slo: SloSpec,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub learner: LearnerConfig,
    pub router: RouterConfig,
    pub engines: Vec<EngineConfig>,
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub logs: LogConfig,
    /// Verify engine invariants on every step; a violation aborts the run.
    #[serde(default)]
    pub check_invariants: bool,
}

impl RunConfig {
    /// Parses a config, expanding engine profile references.
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let cfg = Self::parse(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn parse(text: &str) -> Result<Self, SimError> {
        let mut value: serde_json::Value = serde_json::from_str(text)?;
        presets::expand_config(&mut value)?;
        Ok(serde_json::from_value(value)?)
    }

    /// Loads a config file; a relative trace path is resolved against it.
    pub fn from_file(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(trace) = &cfg.workload.trace {
            if trace.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.workload.trace = Some(base.join(trace));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |m: String| Err(SimError::Config(m));
        if self.engines.is_empty() {
            return fail("at least one engine is required".into());
        }
        if !(self.duration_ms > 0.0 && self.duration_ms.is_finite()) {
            return fail("duration_ms must be > 0".into());
        }
        let mut ids: Vec<u32> = self.engines.iter().map(|e| e.engine_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return fail("engine ids must be unique".into());
        }
        self.slo.validate().map_err(SimError::Config)?;
        self.scheduler.validate().map_err(SimError::Config)?;
        self.learner.validate().map_err(SimError::Config)?;
        self.router.validate().map_err(SimError::Config)?;
        for e in &self.engines {
            e.validate().map_err(SimError::Config)?;
        }
        self.workload.validate().map_err(SimError::Config)
    }
}

/// Builds the request stream of a run from its own rng substream.
pub fn build_workload(cfg: &RunConfig) -> Result<Vec<TraceRecord>, WorkloadError> {
    let mut rng = rng_stream(cfg.seed, WORKLOAD_STREAM);
    let spec = &cfg.workload;
    let mut records = if let Some(path) = &spec.trace {
        let mut recs = load_trace(path)?;
        if let Some(n) = spec.n {
            recs.truncate(n);
        }
        recs
    } else {
        let stats = match (&spec.scenario, &spec.stats) {
            (Some(name), _) => {
                presets::scenario(name).ok_or_else(|| WorkloadError::Config(format!("unknown scenario {name:?}")))?
            }
            (None, Some(stats)) => stats.clone(),
            (None, None) => return Err(WorkloadError::Config("no workload source".into())),
        };
        synth_generate_with(&stats, spec.n.unwrap_or(0), &mut rng)?
    };
    assign_arrivals_with(&mut records, spec.arrival, &mut rng)?;
    Ok(records)
}

pub fn hash_records(records: &[TraceRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.arrival_ms.to_bits().to_le_bytes());
        h.update(r.session_id.to_le_bytes());
        h.update(r.prompt_tokens.to_le_bytes());
        h.update(r.output_tokens.to_le_bytes());
    }
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Simulation time in integer microseconds.
pub type SimTime = i64;

pub fn to_us(ms: f64) -> SimTime {
    (ms * 1000.0).round() as SimTime
}

pub fn to_ms(t: SimTime) -> f64 {
    t as f64 / 1000.0
}

#[derive(Debug, Clone)]
enum EventKind {
    Arrival(usize),
    StepComplete(usize),
    StateReport(usize),
    StateDelivery(StateVector),
    LearnerUpdate(usize, DueUpdates),
}

impl EventKind {
    fn tag(&self) -> String {
        match self {
            EventKind::Arrival(i) => format!("arrival:{i}"),
            EventKind::StepComplete(e) => format!("step:{e}"),
            EventKind::StateReport(e) => format!("report:{e}"),
            EventKind::StateDelivery(sv) => format!("deliver:{}", sv.engine_id),
            EventKind::LearnerUpdate(e, _) => format!("learn:{e}"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PlanLogEntry {
    pub time_ms: f64,
    pub engine_id: u32,
    pub b: u32,
    pub s: u32,
    pub predicted_ms: f64,
    pub actual_ms: f64,
    pub target_ms: f64,
    pub slo_risk: bool,
    pub overload: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RoutingLogEntry {
    pub time_ms: f64,
    pub request_id: u64,
    pub engine_id: u32,
    pub all_stale: bool,
    pub scores: Vec<EngineScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineReport {
    pub engine_id: u32,
    pub scheduler_policy: SchedulerPolicy,
    pub requests_routed: usize,
    pub learned_params: PerfParams,
    pub learner: LearnerCounters,
    pub tradeoff: TradeoffModel,
    pub samples_seen: u64,
    pub kv_evictions: u64,
    pub stats: EngineStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub router_policy: RouterPolicy,
    pub metrics: MetricsSummary,
    pub engines: Vec<EngineReport>,
    pub sim_end_ms: f64,
    pub events_processed: u64,
    pub arrival_hash: String,
    pub event_hash: String,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub records: Vec<RequestRecord>,
    pub plans: Vec<PlanLogEntry>,
    pub routing: Vec<RoutingLogEntry>,
}

struct Simulation<'a> {
    cfg: &'a RunConfig,
    workload: Vec<TraceRecord>,
    engines: Vec<Engine>,
    index: BTreeMap<u32, usize>,
    router: Router,
    queue: BTreeMap<(SimTime, u64), EventKind>,
    seq: u64,
    arrivals_left: usize,
    hasher: Sha256,
    events: u64,
    records: Vec<RequestRecord>,
    routed: BTreeMap<u32, usize>,
    submitted: usize,
    rejected: usize,
    plans: Vec<PlanLogEntry>,
    routing: Vec<RoutingLogEntry>,
}

impl<'a> Simulation<'a> {
    fn new(cfg: &'a RunConfig, workload: Vec<TraceRecord>) -> Result<Self, SimError> {
        let engines: Vec<Engine> = cfg
            .engines
            .iter()
            .enumerate()
            .map(|(i, ec)| {
                let mut e = Engine::new(
                    ec.clone(),
                    &cfg.scheduler,
                    cfg.slo,
                    cfg.learner,
                    rng_stream(cfg.seed, ENGINE_STREAM_BASE + i as u64),
                );
                e.set_strict(cfg.check_invariants);
                e
            })
            .collect();
        let ids: Vec<u32> = engines.iter().map(Engine::id).collect();
        let router = Router::new(cfg.router.clone(), cfg.slo, &ids, rng_stream(cfg.seed, ROUTER_STREAM))?;
        Ok(Simulation {
            index: ids.iter().enumerate().map(|(i, &e)| (e, i)).collect(),
            routed: ids.iter().map(|&e| (e, 0)).collect(),
            arrivals_left: workload.len(),
            workload,
            engines,
            router,
            cfg,
            queue: BTreeMap::new(),
            seq: 0,
            hasher: Sha256::new(),
            events: 0,
            records: Vec::new(),
            submitted: 0,
            rejected: 0,
            plans: Vec::new(),
            routing: Vec::new(),
        })
    }

    fn schedule(&mut self, at: SimTime, kind: EventKind) {
        self.queue.insert((at, self.seq), kind);
        self.seq += 1;
    }

    fn run(mut self) -> Result<RunOutput, SimError> {
        let arrival_hash = hash_records(&self.workload);
        for i in 0..self.engines.len() {
            self.schedule(0, EventKind::StateReport(i));
        }
        for i in 0..self.workload.len() {
            let at = to_us(self.workload[i].arrival_ms);
            self.schedule(at, EventKind::Arrival(i));
        }
        let horizon = to_us(self.cfg.duration_ms);
        let mut now = 0;
        while let Some(((t, seq), kind)) = self.queue.pop_first() {
            if t > horizon {
                break;
            }
            now = t;
            self.events += 1;
            self.hasher.update(format!("{t}|{seq}|{};", kind.tag()).as_bytes());
            self.handle(t, kind)?;
        }

        let unfinished = self
            .engines
            .iter()
            .map(|e| e.wait_queue().len() + e.run_queue().len())
            .sum();
        let span = to_ms(now);
        let metrics = summarize(
            &SummaryInput {
                records: &self.records,
                submitted: self.submitted,
                unfinished,
                rejected: self.rejected,
                routed: &self.routed,
                span_ms: span,
            },
            &self.cfg.slo,
        )?;
        let engines = self
            .engines
            .iter()
            .map(|e| EngineReport {
                engine_id: e.id(),
                scheduler_policy: e.config().scheduler_policy,
                requests_routed: self.routed[&e.id()],
                learned_params: e.learner().params(),
                learner: e.learner().counters(),
                tradeoff: *e.tradeoff(),
                samples_seen: e.learner().samples_seen(),
                kv_evictions: e.kv().evictions(),
                stats: e.stats(),
            })
            .collect();
        let summary = RunSummary {
            name: self.cfg.name.clone(),
            seed: self.cfg.seed,
            router_policy: self.cfg.router.policy,
            metrics,
            engines,
            sim_end_ms: span,
            events_processed: self.events,
            arrival_hash,
            event_hash: hex(&self.hasher.finalize()),
        };
        Ok(RunOutput {
            summary,
            records: self.records,
            plans: self.plans,
            routing: self.routing,
        })
    }

    fn active(&self) -> bool {
        self.arrivals_left > 0 || self.engines.iter().any(|e| e.has_work() || e.is_busy())
    }

    fn handle(&mut self, t: SimTime, kind: EventKind) -> Result<(), SimError> {
        let now = to_ms(t);
        match kind {
            EventKind::Arrival(i) => {
                self.arrivals_left -= 1;
                self.submitted += 1;
                let rec = self.workload[i];
                let decision = self.router.route(rec.session_id, rec.prompt_tokens, now);
                let idx = self.index[&decision.engine_id];
                *self.routed.get_mut(&decision.engine_id).expect("registered") += 1;
                if self.cfg.logs.routing {
                    self.routing.push(RoutingLogEntry {
                        time_ms: now,
                        request_id: i as u64,
                        engine_id: decision.engine_id,
                        all_stale: decision.all_stale,
                        scores: decision.scores,
                    });
                }
                let req = Request::new(i as u64, rec.session_id, rec.prompt_tokens, rec.output_tokens, now);
                match self.engines[idx].admit(req) {
                    Ok(_) => self.try_start(idx, t)?,
                    Err(AdmitError::QueueFull | AdmitError::TooLarge) => self.rejected += 1,
                }
            }
            EventKind::StepComplete(idx) => {
                let outcome = self.engines[idx].complete_step(now).map_err(SimError::Abort)?;
                let engine_id = self.engines[idx].id();
                if self.cfg.logs.plans {
                    let p = &outcome.plan;
                    self.plans.push(PlanLogEntry {
                        time_ms: now - outcome.actual_ms,
                        engine_id,
                        b: p.b,
                        s: p.s,
                        predicted_ms: p.predicted_ms,
                        actual_ms: outcome.actual_ms,
                        target_ms: p.target_ms,
                        slo_risk: p.slo_risk,
                        overload: p.overload,
                    });
                }
                for fin in &outcome.finished {
                    let r = &fin.request;
                    let rec = RequestRecord {
                        request_id: r.id,
                        session_id: r.session_id,
                        arrival: r.arrival,
                        first_token_at: r.first_token_at.unwrap_or(fin.completed_at),
                        completed_at: fin.completed_at,
                        prompt_tokens: r.prompt_len,
                        output_tokens: r.target_decode,
                        engine_id,
                    };
                    self.router.on_complete(
                        engine_id,
                        r.session_id,
                        r.target_decode,
                        rec.completed_at - rec.arrival,
                        now,
                    );
                    self.records.push(rec);
                }
                if outcome.learner_due.any() {
                    self.schedule(t, EventKind::LearnerUpdate(idx, outcome.learner_due));
                }
                self.try_start(idx, t)?;
            }
            EventKind::StateReport(idx) => {
                let sv = self.engines[idx].export_state(now);
                let delay = self.engines[idx].config().state_staleness;
                if delay == 0.0 {
                    self.router.update_state(sv);
                } else {
                    self.schedule(t + to_us(delay), EventKind::StateDelivery(sv));
                }
                if self.active() {
                    let period = to_us(self.engines[idx].config().state_report_period).max(1);
                    self.schedule(t + period, EventKind::StateReport(idx));
                }
            }
            EventKind::StateDelivery(sv) => self.router.update_state(sv),
            EventKind::LearnerUpdate(idx, due) => {
                self.engines[idx].learner_mut().apply_due(due);
            }
        }
        Ok(())
    }

    fn try_start(&mut self, idx: usize, t: SimTime) -> Result<(), SimError> {
        if self.engines[idx].is_busy() {
            return Ok(());
        }
        if let Some(ms) = self.engines[idx].begin_step(to_ms(t)).map_err(SimError::Abort)? {
            self.schedule(t + to_us(ms).max(1), EventKind::StepComplete(idx));
        }
        Ok(())
    }
}

/// Runs one simulation.
pub fn run(cfg: &RunConfig) -> Result<RunOutput, SimError> {
    cfg.validate()?;
    let workload = build_workload(cfg)?;
    Simulation::new(cfg, workload)?.run()
}

/// Serialized summary; byte-identical for identical configs.
pub fn summary_json(summary: &RunSummary) -> Result<String, SimError> {
    Ok(serde_json::to_string_pretty(summary)?)
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, SimError> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| SimError::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), SimError> {
    let mut w = create(path)?;
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        writeln!(w).map_err(|e| SimError::io(path, e))?;
    }
    w.flush().map_err(|e| SimError::io(path, e))
}

/// Writes summary.json, requests.csv and any enabled JSONL logs into `dir`.
pub fn write_outputs(out: &RunOutput, cfg: &RunConfig, dir: &Path) -> Result<(), SimError> {
    std::fs::create_dir_all(dir).map_err(|e| SimError::io(dir, e))?;
    let summary_path = dir.join("summary.json");
    std::fs::write(&summary_path, summary_json(&out.summary)? + "\n").map_err(|e| SimError::io(&summary_path, e))?;
    let csv_path = dir.join("requests.csv");
    write_requests_csv(&out.records, &cfg.slo, create(&csv_path)?)?;
    if cfg.logs.plans {
        write_jsonl(&dir.join("plans.jsonl"), &out.plans)?;
    }
    if cfg.logs.routing {
        write_jsonl(&dir.join("routing.jsonl"), &out.routing)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Rate,
    Policy,
    Budget,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rate" => Ok(SweepAxis::Rate),
            "policy" => Ok(SweepAxis::Policy),
            "budget" => Ok(SweepAxis::Budget),
            other => Err(format!("unknown sweep axis {other:?} (rate | policy | budget)")),
        }
    }
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> Option<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).ok()
}

/// Returns `cfg` with one axis set to `value`.
pub fn apply_axis(cfg: &RunConfig, axis: SweepAxis, value: &str) -> Result<RunConfig, SimError> {
    let mut c = cfg.clone();
    let bad = || SimError::Config(format!("invalid value {value:?} for axis {axis:?}"));
    match axis {
        SweepAxis::Rate => {
            let v: f64 = value.parse().map_err(|_| bad())?;
            c.workload.arrival = match c.workload.arrival {
                ArrivalMode::Qps { poisson, .. } => ArrivalMode::Qps { rate: v, poisson },
                ArrivalMode::Timestamp { .. } => ArrivalMode::Timestamp { scale: v },
            };
        }
        SweepAxis::Budget => {
            let v: u32 = value.parse().map_err(|_| bad())?;
            for e in &mut c.engines {
                e.static_budget = v;
                e.m_max = e.m_max.max(v);
            }
        }
        SweepAxis::Policy => {
            if let Some(p) = parse_enum::<SchedulerPolicy>(value) {
                for e in &mut c.engines {
                    e.scheduler_policy = p;
                }
            } else if let Some(p) = parse_enum::<RouterPolicy>(value) {
                c.router.policy = p;
            } else {
                return Err(bad());
            }
        }
    }
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub completed: Option<usize>,
    pub slo_attainment: Option<f64>,
    pub p50_e2e: Option<f64>,
    pub p90_e2e: Option<f64>,
    pub p50_ttft: Option<f64>,
    pub mean_ttft: Option<f64>,
    pub p50_tpot: Option<f64>,
    pub mean_tpot: Option<f64>,
    pub throughput_rps: Option<f64>,
    pub arrival_hash: Option<String>,
    pub error: Option<String>,
}

/// One run per axis value, in parallel; failures are recorded per row.
pub fn sweep(cfg: &RunConfig, axis: SweepAxis, values: &[String]) -> Vec<SweepRow> {
    values
        .par_iter()
        .map(|v| match apply_axis(cfg, axis, v).and_then(|c| run(&c)) {
            Ok(out) => {
                let m = &out.summary.metrics;
                SweepRow {
                    value: v.clone(),
                    completed: Some(m.completed),
                    slo_attainment: Some(m.slo_attainment),
                    p50_e2e: m.p50_e2e,
                    p90_e2e: m.p90_e2e,
                    p50_ttft: m.p50_ttft,
                    mean_ttft: m.mean_ttft,
                    p50_tpot: m.p50_tpot,
                    mean_tpot: m.mean_tpot,
                    throughput_rps: Some(m.throughput_rps),
                    arrival_hash: Some(out.summary.arrival_hash),
                    error: None,
                }
            }
            Err(e) => SweepRow {
                value: v.clone(),
                completed: None,
                slo_attainment: None,
                p50_e2e: None,
                p90_e2e: None,
                p50_ttft: None,
                mean_ttft: None,
                p50_tpot: None,
                mean_tpot: None,
                throughput_rps: None,
                arrival_hash: None,
                error: Some(e.to_string()),
            },
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], out: impl std::io::Write) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| SimError::io("sweep.csv", e))
}

/// Sustained completion rate (requests/s) of `cfg` under a deliberately
/// overloading uniform arrival rate, counted over the second half of the run
/// so warm-up and work still in flight at the end do not bias it.
pub fn measure_saturation(cfg: &RunConfig, overload_rate: f64) -> Result<f64, SimError> {
    let mut c = cfg.clone();
    c.workload.arrival = ArrivalMode::Qps {
        rate: overload_rate,
        poisson: false,
    };
    let n = c.workload.n.unwrap_or(0);
    // Stop while the backlog is still present so the rate reflects capacity.
    c.duration_ms = n as f64 * 1000.0 / overload_rate;
    let out = run(&c)?;
    let half = c.duration_ms / 2.0;
    let done = out.records.iter().filter(|r| r.completed_at >= half).count();
    Ok(done as f64 / (half / 1000.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_roundtrip() {
        assert_eq!(to_us(1.2345), 1235);
        assert_eq!(to_ms(1500), 1.5);
    }

    #[test]
    fn streams_are_independent() {
        use rand::Rng;
        let a: u64 = rng_stream(5, 1).random();
        let b: u64 = rng_stream(5, 2).random();
        let a2: u64 = rng_stream(5, 1).random();
        assert_ne!(a, b);
        assert_eq!(a, a2);
    }
}
