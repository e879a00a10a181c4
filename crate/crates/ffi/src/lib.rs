//! C ABI over the servesim latency model, online learner, budget search,
//! router and simulator.
//!
//! Every fallible function returns an [`SsStatus`]; on failure a message is
//! stored per thread and can be read with [`ss_last_error`]. Handles are
//! opaque and must be released with their matching `_free` function. Strings
//! returned by the library must be released with [`ss_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use servesim::learner::{LatencySample, LearnerConfig, LearnerState};
use servesim::lens::{binary_search_budget, SchedulerConfig, SloSpec};
use servesim::router::{Router, RouterConfig, StateVector};
use servesim::sim::{rng_stream, summary_json};
use servesim::{goodness_of_fit, BatchShape, PerfParams, RunConfig};

/// Substream a simulation run reserves for its router.
const ROUTER_STREAM: u64 = 2;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidUtf8 = 3,
    InvalidConfig = 4,
    SimulationFailed = 5,
    Panic = 6,
}

/// Latency-model coefficients. Latencies are ms, throughput tokens per ms.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsPerfParams {
    pub tau0: f64,
    pub w0: f64,
    pub ws: f64,
    pub tau_b: f64,
    pub tau_s: f64,
    pub p_max: f64,
    pub k_b: f64,
    pub k_s: f64,
}

impl From<SsPerfParams> for PerfParams {
    fn from(p: SsPerfParams) -> Self {
        PerfParams {
            tau0: p.tau0,
            w0: p.w0,
            ws: p.ws,
            tau_b: p.tau_b,
            tau_s: p.tau_s,
            p_max: p.p_max,
            k_b: p.k_b,
            k_s: p.k_s,
        }
    }
}

impl From<PerfParams> for SsPerfParams {
    fn from(p: PerfParams) -> Self {
        SsPerfParams {
            tau0: p.tau0,
            w0: p.w0,
            ws: p.ws,
            tau_b: p.tau_b,
            tau_s: p.tau_s,
            p_max: p.p_max,
            k_b: p.k_b,
            k_s: p.k_s,
        }
    }
}

/// Engine state as reported to the router.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsStateVector {
    pub engine_id: u32,
    /// Remaining predicted time of the in-flight step (ms).
    pub l_hat: f64,
    /// Pending workload (tokens).
    pub w_load: f64,
    /// Free KV tokens.
    pub m_free: f64,
    /// Effective token rate (tokens per ms).
    pub p_max: f64,
    pub queue_len: u32,
    /// Simulation or wall time of the report (ms).
    pub reported_at: f64,
}

/// Opaque online learner.
pub struct SsLearner(LearnerState);

/// Opaque request router.
pub struct SsRouter(Router);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (SsStatus, String)>) -> SsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SsStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside servesim");
            SsStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, (SsStatus, String)> {
    // SAFETY: callers pass pointers valid for reads or null.
    unsafe { p.as_ref() }.ok_or((SsStatus::NullPointer, format!("{what} is null")))
}

fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (SsStatus, String)> {
    // SAFETY: callers pass pointers valid for writes or null.
    unsafe { p.as_mut() }.ok_or((SsStatus::NullPointer, format!("{what} is null")))
}

fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (SsStatus, String)> {
    if p.is_null() {
        return Err((SsStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: non-null and NUL-terminated per the API contract.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|e| (SsStatus::InvalidUtf8, format!("{what}: {e}")))
}

fn shape(b: u32, s: u32) -> Result<BatchShape, (SsStatus, String)> {
    BatchShape::new(b, s).map_err(|e| (SsStatus::InvalidArgument, e.to_string()))
}

fn params(p: *const SsPerfParams) -> Result<PerfParams, (SsStatus, String)> {
    let p: PerfParams = (*non_null(p, "params")?).into();
    p.validate().map_err(|e| (SsStatus::InvalidArgument, e.to_string()))?;
    Ok(p)
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ss_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn ss_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Rejects coefficients outside their valid ranges.
#[no_mangle]
pub extern "C" fn ss_params_validate(p: *const SsPerfParams) -> SsStatus {
    guard(|| params(p).map(|_| ()))
}

/// Predicted step latency (ms) for a batch of `b` requests and `s` tokens.
#[no_mangle]
pub extern "C" fn ss_predict_latency(p: *const SsPerfParams, b: u32, s: u32, latency_ms: *mut f64) -> SsStatus {
    guard(|| {
        let value = params(p)?.predict_latency(shape(b, s)?);
        *out(latency_ms, "latency_ms")? = value;
        Ok(())
    })
}

/// Effective throughput (tokens per ms) for a batch shape.
#[no_mangle]
pub extern "C" fn ss_throughput(p: *const SsPerfParams, b: u32, s: u32, tokens_per_ms: *mut f64) -> SsStatus {
    guard(|| {
        let value = params(p)?.throughput(shape(b, s)?);
        *out(tokens_per_ms, "tokens_per_ms")? = value;
        Ok(())
    })
}

/// R² of the model against `n` observed `(b[i], s[i], observed_ms[i])` samples.
///
/// # Safety
/// The three arrays must each hold `n` readable elements.
#[no_mangle]
pub unsafe extern "C" fn ss_goodness_of_fit(
    p: *const SsPerfParams,
    b: *const u32,
    s: *const u32,
    observed_ms: *const f64,
    n: usize,
    r2: *mut f64,
) -> SsStatus {
    guard(|| {
        let p = params(p)?;
        non_null(b, "b")?;
        non_null(s, "s")?;
        non_null(observed_ms, "observed_ms")?;
        let (b, s, obs) = (
            std::slice::from_raw_parts(b, n),
            std::slice::from_raw_parts(s, n),
            std::slice::from_raw_parts(observed_ms, n),
        );
        let samples = (0..n)
            .map(|i| Ok(LatencySample::new(shape(b[i], s[i])?, obs[i], i as f64)))
            .collect::<Result<Vec<_>, _>>()?;
        let value = goodness_of_fit(&p, &samples).map_err(|e| (SsStatus::InvalidArgument, e.to_string()))?;
        *out(r2, "r2")? = value;
        Ok(())
    })
}

/// Largest token budget in `[b, m_max]` whose predicted latency fits
/// `target_ms`, or `b` if none does.
#[no_mangle]
pub extern "C" fn ss_search_budget(
    p: *const SsPerfParams,
    b: u32,
    target_ms: f64,
    m_max: u32,
    n_search_iters: u32,
    budget: *mut u32,
) -> SsStatus {
    guard(|| {
        let p = params(p)?;
        if b == 0 || b > m_max || !target_ms.is_finite() {
            return Err((
                SsStatus::InvalidArgument,
                format!("need 1 <= b <= m_max and a finite target, got b={b} m_max={m_max}"),
            ));
        }
        let cfg = SchedulerConfig {
            m_max,
            n_search_iters,
            ..SchedulerConfig::default()
        };
        *out(budget, "budget")? = binary_search_budget(b, target_ms, &p, &cfg);
        Ok(())
    })
}

/// Creates an online learner starting from `initial` with default windows.
///
/// # Safety
/// `learner` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ss_learner_new(initial: *const SsPerfParams, learner: *mut *mut SsLearner) -> SsStatus {
    guard(|| {
        let initial = params(initial)?;
        let slot = out(learner, "learner")?;
        *slot = Box::into_raw(Box::new(SsLearner(LearnerState::new(
            LearnerConfig::default(),
            initial,
        ))));
        Ok(())
    })
}

/// Feeds one observed step latency to the learner.
///
/// # Safety
/// `learner` must be a live handle from [`ss_learner_new`].
#[no_mangle]
pub unsafe extern "C" fn ss_learner_record(
    learner: *mut SsLearner,
    b: u32,
    s: u32,
    observed_ms: f64,
    time_ms: f64,
) -> SsStatus {
    guard(|| {
        let l = out(learner, "learner")?;
        let shape = shape(b, s)?;
        if !(observed_ms.is_finite() && observed_ms > 0.0 && time_ms.is_finite()) {
            return Err((
                SsStatus::InvalidArgument,
                format!("bad sample: observed {observed_ms} ms at {time_ms} ms"),
            ));
        }
        l.0.record_sample(LatencySample::new(shape, observed_ms, time_ms));
        Ok(())
    })
}

/// Current learned coefficients.
///
/// # Safety
/// `learner` must be a live handle from [`ss_learner_new`].
#[no_mangle]
pub unsafe extern "C" fn ss_learner_params(learner: *const SsLearner, params: *mut SsPerfParams) -> SsStatus {
    guard(|| {
        let l = non_null(learner, "learner")?;
        *out(params, "params")? = l.0.params().into();
        Ok(())
    })
}

/// # Safety
/// `learner` must be null or a live handle from [`ss_learner_new`].
#[no_mangle]
pub unsafe extern "C" fn ss_learner_free(learner: *mut SsLearner) {
    if !learner.is_null() {
        drop(Box::from_raw(learner));
    }
}

/// Creates a router over engines `engine_ids[0..n]`. `config_json` is a
/// router configuration object, e.g. `{"policy":"prism"}`. Weighted sampling
/// draws from the same seed substream a simulation run would use.
///
/// # Safety
/// `engine_ids` must hold `n` readable elements; `router` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ss_router_new(
    config_json: *const c_char,
    ttft_slo_ms: f64,
    tpot_slo_ms: f64,
    engine_ids: *const u32,
    n: usize,
    seed: u64,
    router: *mut *mut SsRouter,
) -> SsStatus {
    guard(|| {
        let cfg: RouterConfig = serde_json::from_str(str_arg(config_json, "config_json")?)
            .map_err(|e| (SsStatus::InvalidConfig, e.to_string()))?;
        let ids: &[u32] = if n == 0 {
            &[]
        } else {
            non_null(engine_ids, "engine_ids")?;
            std::slice::from_raw_parts(engine_ids, n)
        };
        let slo = SloSpec {
            ttft_slo: ttft_slo_ms,
            tpot_slo: tpot_slo_ms,
        };
        slo.validate().map_err(|e| (SsStatus::InvalidArgument, e))?;
        let r = Router::new(cfg, slo, ids, rng_stream(seed, ROUTER_STREAM))
            .map_err(|e| (SsStatus::InvalidConfig, e.to_string()))?;
        *out(router, "router")? = Box::into_raw(Box::new(SsRouter(r)));
        Ok(())
    })
}

/// Delivers an engine state report.
///
/// # Safety
/// `router` must be a live handle from [`ss_router_new`].
#[no_mangle]
pub unsafe extern "C" fn ss_router_update(router: *mut SsRouter, state: *const SsStateVector) -> SsStatus {
    guard(|| {
        let r = out(router, "router")?;
        let s = non_null(state, "state")?;
        r.0.update_state(StateVector {
            engine_id: s.engine_id,
            l_hat: s.l_hat,
            w_load: s.w_load,
            m_free: s.m_free,
            p_max: s.p_max,
            queue_len: s.queue_len,
            reported_at: s.reported_at,
        });
        Ok(())
    })
}

/// Picks an engine for a request.
///
/// # Safety
/// `router` must be a live handle from [`ss_router_new`].
#[no_mangle]
pub unsafe extern "C" fn ss_router_route(
    router: *mut SsRouter,
    session_id: u64,
    prompt_len: u32,
    now_ms: f64,
    engine_id: *mut u32,
) -> SsStatus {
    guard(|| {
        let r = out(router, "router")?;
        let slot = out(engine_id, "engine_id")?;
        *slot = r.0.route(session_id, prompt_len, now_ms).engine_id;
        Ok(())
    })
}

/// # Safety
/// `router` must be null or a live handle from [`ss_router_new`].
#[no_mangle]
pub unsafe extern "C" fn ss_router_free(router: *mut SsRouter) {
    if !router.is_null() {
        drop(Box::from_raw(router));
    }
}

/// Runs a full simulation from a JSON run configuration and returns the
/// summary JSON in `*summary_json_out` (free with [`ss_string_free`]).
///
/// # Safety
/// `summary_json_out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ss_run_config_json(
    config_json: *const c_char,
    summary_json_out: *mut *mut c_char,
) -> SsStatus {
    guard(|| {
        let slot = out(summary_json_out, "summary_json_out")?;
        let cfg = RunConfig::from_json(str_arg(config_json, "config_json")?)
            .map_err(|e| (SsStatus::InvalidConfig, e.to_string()))?;
        let output = servesim::run(&cfg).map_err(|e| (SsStatus::SimulationFailed, e.to_string()))?;
        let text = summary_json(&output.summary).map_err(|e| (SsStatus::SimulationFailed, e.to_string()))?;
        *slot = CString::new(text)
            .map_err(|e| (SsStatus::SimulationFailed, e.to_string()))?
            .into_raw();
        Ok(())
    })
}
