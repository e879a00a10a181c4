//! Online, two-rate calibration of [`PerfParams`].
//!
//! The linear coefficients `(tau0, w0, ws, tauB, tauS)` are refreshed often
//! from a short window by closed-form least squares with the saturation
//! curve held fixed. The saturation curve `(p_max, kB, kS)` is refreshed
//! rarely from the long window by damped Gauss-Newton (Levenberg-Marquardt) in log space,
//! profiling out the linear coefficients at every trial point.
//!
//! `p_max` and the workload coefficients share a scale: multiplying
//! `p_max`, `w0` and `ws` by the same factor leaves every prediction
//! unchanged. The structural fit therefore pins `ws = 1`, so `p_max` is
//! reported in tokens per ms.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::perf_model::{saturation, BatchShape, PerfParams};

pub const WS_MIN: f64 = 1e-6;
pub const P_MAX_MIN: f64 = 1e-3;
pub const MIN_LINEAR_SAMPLES: usize = 5;
pub const MAX_STRUCTURAL_ITERS: usize = 50;
/// Mean relative error above which a stalled learner asks for exploration.
pub const EXPLORE_ERROR: f64 = 0.25;

/// Sensitivity (relative change of prediction per unit change of `ln k`)
/// below which a saturation rate is considered unobserved by the data.
const IDENTIFIABILITY_FLOOR: f64 = 1e-6;
/// Singular values of the column-normalised design below this fraction of
/// the largest are treated as zero.
const RANK_TOL: f64 = 1e-5;

/// One observed step: its batch shape and measured latency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub shape: BatchShape,
    pub observed_ms: f64,
    #[serde(default)]
    pub sim_time: f64,
}

impl LatencySample {
    pub fn new(shape: BatchShape, observed_ms: f64, sim_time: f64) -> Self {
        LatencySample {
            shape,
            observed_ms,
            sim_time,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub long_window: usize,
    pub short_window: usize,
    pub structural_period: u64,
    pub linear_period: u64,
    pub min_structural_samples: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            long_window: 4096,
            short_window: 64,
            structural_period: 1024,
            linear_period: 32,
            min_structural_samples: 256,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.long_window == 0
            || self.short_window == 0
            || self.structural_period == 0
            || self.linear_period == 0
            || self.min_structural_samples == 0
        {
            return Err("learner windows and periods must be > 0".into());
        }
        if self.short_window >= self.long_window {
            return Err("learner short_window must be < long_window".into());
        }
        if self.linear_period >= self.structural_period {
            return Err("learner linear_period must be < structural_period".into());
        }
        Ok(())
    }
}

/// Something noteworthy that happened during a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitEvent {
    /// Fewer than [`MIN_LINEAR_SAMPLES`] (or `min_structural_samples`) buffered.
    InsufficientSamples,
    /// Design matrix was rank deficient; previous coefficients kept.
    DegenerateUpdate,
    /// A coefficient hit its invariant floor.
    Clamped(Coefficient),
    /// Structural fit produced invalid parameters; previous ones kept.
    FailedFit,
    /// The window carries no information about the saturation rates.
    LowIdentifiability,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coefficient {
    Tau0,
    W0,
    Ws,
    TauB,
    TauS,
}

impl Coefficient {
    const ALL: [Coefficient; 5] = [
        Coefficient::Tau0,
        Coefficient::W0,
        Coefficient::Ws,
        Coefficient::TauB,
        Coefficient::TauS,
    ];

    fn floor(self) -> f64 {
        match self {
            Coefficient::Ws => WS_MIN,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub params: PerfParams,
    pub events: Vec<FitEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuralFit {
    pub params: PerfParams,
    pub events: Vec<FitEvent>,
    /// Profiled windowed squared error at the previous structural parameters.
    pub sse_before: f64,
    /// Profiled windowed squared error at the accepted structural parameters.
    pub sse_after: f64,
    pub iterations: usize,
}

/// Which refits a newly buffered sample made due.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DueUpdates {
    pub linear: bool,
    pub structural: bool,
}

impl DueUpdates {
    pub fn any(&self) -> bool {
        self.linear || self.structural
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateReport {
    pub linear: Option<LinearFit>,
    pub structural: Option<StructuralFit>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnerCounters {
    pub linear_updates: u64,
    pub structural_updates: u64,
    pub degenerate_updates: u64,
    pub clamp_events: u64,
    pub failed_fits: u64,
    pub low_identifiability: u64,
}

/// Checkpoint view of a learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerDump {
    pub params: PerfParams,
    pub samples_seen: u64,
    pub buffered: usize,
    pub counters: LearnerCounters,
}

#[derive(Debug, Clone)]
pub struct LearnerState {
    config: LearnerConfig,
    current: PerfParams,
    buffer: VecDeque<LatencySample>,
    samples_seen: u64,
    counters: LearnerCounters,
    /// The latest linear refit found the short window rank deficient.
    stalled: bool,
}

impl LearnerState {
    pub fn new(config: LearnerConfig, initial: PerfParams) -> Self {
        LearnerState {
            config,
            current: initial,
            buffer: VecDeque::with_capacity(config.long_window),
            samples_seen: 0,
            counters: LearnerCounters::default(),
            stalled: false,
        }
    }

    /// Immutable snapshot of the current parameters.
    pub fn params(&self) -> PerfParams {
        self.current
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn samples_seen(&self) -> u64 {
        self.samples_seen
    }

    pub fn buffer(&self) -> &VecDeque<LatencySample> {
        &self.buffer
    }

    pub fn counters(&self) -> LearnerCounters {
        self.counters
    }

    /// True while the most recent linear refit was degenerate, i.e. the
    /// observed batch shapes do not span the model.
    pub fn is_stalled(&self) -> bool {
        self.stalled
    }

    /// Stalled and visibly wrong: the current parameters miss the short
    /// window by more than [`EXPLORE_ERROR`] on average.
    pub fn needs_exploration(&self) -> bool {
        if !self.stalled {
            return false;
        }
        let start = self.buffer.len().saturating_sub(self.config.short_window);
        let window: Vec<LatencySample> = self.buffer.range(start..).copied().collect();
        convergence_error(&self.current, &window) > EXPLORE_ERROR
    }

    pub fn dump(&self) -> LearnerDump {
        LearnerDump {
            params: self.current,
            samples_seen: self.samples_seen,
            buffered: self.buffer.len(),
            counters: self.counters,
        }
    }

    /// Buffers a sample and reports which refits are now due, without
    /// running them. The simulator schedules the refits as separate events.
    pub fn push_sample(&mut self, sample: LatencySample) -> DueUpdates {
        if self.buffer.len() == self.config.long_window {
            self.buffer.pop_front();
        }
        self.buffer.push_back(sample);
        self.samples_seen += 1;

        let n = self.samples_seen;
        let min_structural = self.config.min_structural_samples;
        let structural =
            n >= min_structural && (n == min_structural || n.is_multiple_of(self.config.structural_period));
        DueUpdates {
            linear: n.is_multiple_of(self.config.linear_period),
            structural,
        }
    }

    /// Runs refits previously reported as due.
    pub fn apply_due(&mut self, due: DueUpdates) -> UpdateReport {
        if due.structural {
            UpdateReport {
                linear: None,
                structural: Some(self.update_structural()),
            }
        } else if due.linear {
            UpdateReport {
                linear: Some(self.update_linear()),
                structural: None,
            }
        } else {
            UpdateReport::default()
        }
    }

    /// Buffers a sample and immediately runs whichever refits it triggers.
    pub fn record_sample(&mut self, sample: LatencySample) -> UpdateReport {
        let due = self.push_sample(sample);
        self.apply_due(due)
    }

    /// Refits `(tau0, w0, ws, tauB, tauS)` on the short window.
    pub fn update_linear(&mut self) -> LinearFit {
        let start = self.buffer.len().saturating_sub(self.config.short_window);
        let window: Vec<LatencySample> = self.buffer.range(start..).copied().collect();
        let mut events = Vec::new();
        if window.len() < MIN_LINEAR_SAMPLES {
            events.push(FitEvent::InsufficientSamples);
            return LinearFit {
                params: self.current,
                events,
            };
        }

        match fit_linear(&self.current, &window, false) {
            Some(solution) => {
                self.stalled = false;
                self.counters.linear_updates += 1;
                for c in &solution.clamped {
                    events.push(FitEvent::Clamped(*c));
                }
                self.counters.clamp_events += solution.clamped.len() as u64;
                let next = solution.apply(&self.current);
                if next.validate().is_ok() {
                    self.current = next;
                } else {
                    events.push(FitEvent::FailedFit);
                    self.counters.failed_fits += 1;
                }
            }
            None => {
                self.stalled = true;
                self.counters.degenerate_updates += 1;
                events.push(FitEvent::DegenerateUpdate);
            }
        }
        LinearFit {
            params: self.current,
            events,
        }
    }

    /// Refits `(p_max, kB, kS)` on the long window, then refreshes the
    /// linear coefficients under the new saturation curve.
    pub fn update_structural(&mut self) -> StructuralFit {
        let window: Vec<LatencySample> = self.buffer.iter().copied().collect();
        let mut events = Vec::new();
        if (window.len() as u64) < self.config.min_structural_samples.max(MIN_LINEAR_SAMPLES as u64) {
            events.push(FitEvent::InsufficientSamples);
            return StructuralFit {
                params: self.current,
                events,
                sse_before: f64::NAN,
                sse_after: f64::NAN,
                iterations: 0,
            };
        }

        let start = LogStructure::of(&self.current);
        let sse_before = profiled_sse(&window, start);
        let (fitted, sse_after, iterations) = damped_search(&window, start, sse_before);

        let candidate = fitted.params_over(&self.current);

        let usable = sse_after.is_finite() && candidate.validate().is_ok();
        let (ident_b, ident_s) = saturation_observed(&window, if usable { &candidate } else { &self.current });
        let accepted = if !ident_b && !ident_s {
            events.push(FitEvent::LowIdentifiability);
            self.counters.low_identifiability += 1;
            None
        } else if !usable {
            events.push(FitEvent::FailedFit);
            self.counters.failed_fits += 1;
            None
        } else if !ident_b || !ident_s {
            // One rate sits on a flat direction of the error surface: keep its
            // previous value when that costs no fit quality.
            events.push(FitEvent::LowIdentifiability);
            self.counters.low_identifiability += 1;
            let mut partial = fitted;
            let c = if ident_b { 2 } else { 1 };
            partial.0[c] = start.0[c];
            let sse_partial = profiled_sse(&window, partial);
            if sse_partial <= sse_before {
                Some((partial.params_over(&self.current), sse_partial))
            } else {
                Some((candidate, sse_after))
            }
        } else {
            Some((candidate, sse_after))
        };

        let sse_after = match accepted {
            Some((params, sse)) => {
                self.current = params;
                self.counters.structural_updates += 1;
                sse
            }
            None => sse_before,
        };

        let linear = self.update_linear();
        events.extend(linear.events);
        StructuralFit {
            params: self.current,
            events,
            sse_before,
            sse_after,
            iterations,
        }
    }

    /// Mean relative prediction error of the current parameters on `probe`.
    pub fn convergence_error(&self, probe: &[LatencySample]) -> f64 {
        convergence_error(&self.current, probe)
    }
}

/// Mean of `|predicted - observed| / observed` over `probe`.
pub fn convergence_error(params: &PerfParams, probe: &[LatencySample]) -> f64 {
    if probe.is_empty() {
        return 0.0;
    }
    probe
        .iter()
        .map(|s| (params.predict_latency(s.shape) - s.observed_ms).abs() / s.observed_ms)
        .sum::<f64>()
        / probe.len() as f64
}

/// Solution of the linear tier. `coef` is indexed by [`Coefficient::ALL`];
/// when `ws` is pinned its slot holds 1.
struct LinearSolution {
    coef: [f64; 5],
    clamped: Vec<Coefficient>,
    sse: f64,
}

impl LinearSolution {
    fn apply(&self, base: &PerfParams) -> PerfParams {
        PerfParams {
            tau0: self.coef[0],
            w0: self.coef[1],
            ws: self.coef[2],
            tau_b: self.coef[3],
            tau_s: self.coef[4],
            ..*base
        }
    }
}

/// Design row `[1, 1/Thr, S/Thr, B, S]` for one sample under `structure`.
fn design_row(structure: &PerfParams, shape: BatchShape) -> [f64; 5] {
    let inv_thr = 1.0 / structure.throughput(shape);
    let s = shape.s() as f64;
    [1.0, inv_thr, s * inv_thr, shape.b() as f64, s]
}

/// Floor-constrained least squares for the linear coefficients. Coefficients
/// that land below their floor are fixed there and the rest re-solved.
/// Returns `None` when the free columns are rank deficient.
fn fit_linear(structure: &PerfParams, window: &[LatencySample], pin_ws: bool) -> Option<LinearSolution> {
    let rows: Vec<[f64; 5]> = window.iter().map(|s| design_row(structure, s.shape)).collect();
    let y: Vec<f64> = window.iter().map(|s| s.observed_ms).collect();

    let mut fixed: [Option<f64>; 5] = [None; 5];
    if pin_ws {
        fixed[2] = Some(1.0);
    }
    let mut clamped = Vec::new();

    for _ in 0..Coefficient::ALL.len() {
        let free: Vec<usize> = (0..5).filter(|&j| fixed[j].is_none()).collect();
        let mut coef = [0.0; 5];
        for j in 0..5 {
            if let Some(v) = fixed[j] {
                coef[j] = v;
            }
        }
        if !free.is_empty() {
            let solved = solve_least_squares(&rows, &y, &free, &coef)?;
            for (k, &j) in free.iter().enumerate() {
                coef[j] = solved[k];
            }
        }

        let violators: Vec<usize> = free
            .iter()
            .copied()
            .filter(|&j| coef[j] < Coefficient::ALL[j].floor())
            .collect();
        if violators.is_empty() {
            let sse = rows
                .iter()
                .zip(&y)
                .map(|(r, yi)| {
                    let pred: f64 = r.iter().zip(&coef).map(|(a, c)| a * c).sum();
                    (pred - yi).powi(2)
                })
                .sum();
            return Some(LinearSolution { coef, clamped, sse });
        }
        for j in violators {
            fixed[j] = Some(Coefficient::ALL[j].floor());
            clamped.push(Coefficient::ALL[j]);
        }
    }
    None
}

/// Least squares over the `free` columns with the remaining columns held at
/// `coef`. Columns are normalised before the SVD so the rank test is scale
/// free.
fn solve_least_squares(rows: &[[f64; 5]], y: &[f64], free: &[usize], coef: &[f64; 5]) -> Option<Vec<f64>> {
    let n = rows.len();
    let k = free.len();
    if n < k {
        return None;
    }
    let mut a = DMatrix::<f64>::zeros(n, k);
    let mut rhs = DVector::<f64>::zeros(n);
    for (i, row) in rows.iter().enumerate() {
        let mut target = y[i];
        for j in 0..5 {
            if !free.contains(&j) {
                target -= row[j] * coef[j];
            }
        }
        rhs[i] = target;
        for (c, &j) in free.iter().enumerate() {
            a[(i, c)] = row[j];
        }
    }
    let mut scale = vec![1.0; k];
    for (c, sc) in scale.iter_mut().enumerate() {
        let norm = a.column(c).norm();
        if norm == 0.0 || !norm.is_finite() {
            return None;
        }
        *sc = norm;
        a.column_mut(c).scale_mut(1.0 / norm);
    }
    let svd = a.svd(true, true);
    let max_sv = svd.singular_values.max();
    let min_sv = svd.singular_values.min();
    if !(max_sv > 0.0) || min_sv < RANK_TOL * max_sv {
        return None;
    }
    let x = svd.solve(&rhs, 0.0).ok()?;
    Some((0..k).map(|c| x[c] / scale[c]).collect())
}

/// Structural parameters in log space: `[ln p_max, ln kB, ln kS]`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct LogStructure([f64; 3]);

impl LogStructure {
    const LOWER: [f64; 3] = [-6.907_755_278_982_137, -16.0, -16.0]; // ln(P_MAX_MIN), ...
    const UPPER: [f64; 3] = [13.8, 7.0, 7.0];

    fn of(p: &PerfParams) -> Self {
        LogStructure([p.p_max.ln(), p.k_b.ln(), p.k_s.ln()])
    }

    fn p_max(&self) -> f64 {
        self.0[0].exp()
    }

    fn k_b(&self) -> f64 {
        self.0[1].exp()
    }

    fn k_s(&self) -> f64 {
        self.0[2].exp()
    }

    fn params(&self) -> PerfParams {
        self.params_over(&PerfParams::ZERO_CONFIG_PRIOR)
    }

    fn params_over(&self, base: &PerfParams) -> PerfParams {
        PerfParams {
            p_max: self.p_max(),
            k_b: self.k_b(),
            k_s: self.k_s(),
            ..*base
        }
    }
}

/// Residuals `observed - predicted` with the linear coefficients profiled out.
fn profiled_residuals(window: &[LatencySample], structure: LogStructure) -> Option<Vec<f64>> {
    let p = structure.params();
    let sol = fit_linear(&p, window, true)?;
    let fitted = sol.apply(&p);
    Some(
        window
            .iter()
            .map(|s| s.observed_ms - fitted.predict_latency(s.shape))
            .collect(),
    )
}

/// Windowed squared error with the linear coefficients profiled out.
fn profiled_sse(window: &[LatencySample], structure: LogStructure) -> f64 {
    match fit_linear(&structure.params(), window, true) {
        Some(sol) => sol.sse,
        None => f64::INFINITY,
    }
}

/// Levenberg-Marquardt over log-space structure with Marquardt (diagonal)
/// damping: heavy damping degrades to small per-coordinate gradient steps.
/// Only steps that lower the windowed error are taken.
fn damped_search(window: &[LatencySample], start: LogStructure, start_sse: f64) -> (LogStructure, f64, usize) {
    const FD_STEP: f64 = 1e-6;
    let mut theta = start;
    let mut sse = start_sse;
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let Some(mut r) = profiled_residuals(window, theta) else {
        return (theta, sse, 0);
    };
    'outer: while iterations < MAX_STRUCTURAL_ITERS {
        iterations += 1;
        let n = window.len();
        let mut jac = DMatrix::<f64>::zeros(n, 3);
        for c in 0..3 {
            let mut probe = theta;
            probe.0[c] += FD_STEP;
            let Some(rc) = profiled_residuals(window, probe) else {
                break 'outer;
            };
            for i in 0..n {
                jac[(i, c)] = (rc[i] - r[i]) / FD_STEP;
            }
        }
        let rv = DVector::from_column_slice(&r);
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * rv;
        loop {
            let mut lhs = jtj.clone();
            for c in 0..3 {
                lhs[(c, c)] += lambda * jtj[(c, c)].max(1e-12);
            }
            // J = dr/dθ, so the damped normal equations are (J'J + λD) δ = -J'r.
            let Some(step) = lhs.lu().solve(&(-&jtr)) else {
                break 'outer;
            };
            let mut cand = theta;
            for c in 0..3 {
                cand.0[c] = (cand.0[c] + step[c]).clamp(LogStructure::LOWER[c], LogStructure::UPPER[c]);
            }
            let cand_sse = profiled_sse(window, cand);
            if cand_sse < sse {
                let tiny = (sse - cand_sse) <= 1e-15 * sse.max(1e-300);
                theta = cand;
                sse = cand_sse;
                lambda = (lambda / 3.0).max(1e-9);
                match profiled_residuals(window, theta) {
                    Some(next) => r = next,
                    None => break 'outer,
                }
                if tiny {
                    break 'outer;
                }
                break;
            }
            lambda *= 4.0;
            if lambda > 1e12 {
                break 'outer;
            }
        }
    }
    (theta, sse, iterations)
}

/// Whether the window constrains `kB` and `kS`: some sample sits where
/// changing the rate visibly moves the prediction.
fn saturation_observed(window: &[LatencySample], p: &PerfParams) -> (bool, bool) {
    let mut sens_b: f64 = 0.0;
    let mut sens_s: f64 = 0.0;
    for sample in window {
        let shape = sample.shape;
        let t = p.predict_latency(shape);
        let compute = (p.w0 + p.ws * shape.s() as f64) / p.throughput(shape);
        let elasticity = |k: f64, x: f64| {
            let kx = k * x;
            kx * (-kx).exp() / saturation(k, x)
        };
        sens_b = sens_b.max(compute * elasticity(p.k_b, shape.b() as f64) / t);
        sens_s = sens_s.max(compute * elasticity(p.k_s, shape.s() as f64) / t);
    }
    (sens_b >= IDENTIFIABILITY_FLOOR, sens_s >= IDENTIFIABILITY_FLOOR)
}
