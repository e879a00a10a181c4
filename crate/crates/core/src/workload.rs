//! Request streams: trace replay and synthetic scenario generation.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::WorkloadError;

/// One request of a workload trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub arrival_ms: f64,
    pub session_id: u64,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub mean: f64,
    pub p99: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioStats {
    pub name: String,
    pub prompt: LengthStats,
    pub output: LengthStats,
    /// Chance that a request continues a recent session.
    pub session_turn_prob: f64,
}

impl ScenarioStats {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        for (what, l) in [("prompt", self.prompt), ("output", self.output)] {
            if !(l.mean > 0.0) || !(l.p99 >= 0.0) || !(l.std >= 0.0) {
                return Err(WorkloadError::Config(format!(
                    "{}: {what} needs mean > 0, p99 >= 0, std >= 0",
                    self.name
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.session_turn_prob) {
            return Err(WorkloadError::Config(format!(
                "{}: session_turn_prob must be in [0, 1]",
                self.name
            )));
        }
        Ok(())
    }
}

/// Arrival-time assignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ArrivalMode {
    /// Keep recorded arrivals; `scale` multiplies the rate.
    Timestamp {
        #[serde(default = "one")]
        scale: f64,
    },
    /// Uniform spacing at `rate` requests per second, or exponential gaps
    /// with the same mean when `poisson` is set.
    Qps {
        rate: f64,
        #[serde(default)]
        poisson: bool,
    },
}

fn one() -> f64 {
    1.0
}

/// Parses JSONL trace text. Blank lines and lines starting with `#` are skipped.
pub fn parse_trace(reader: impl BufRead) -> Result<Vec<TraceRecord>, WorkloadError> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| WorkloadError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(trimmed).map_err(|e| WorkloadError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if rec.prompt_tokens < 1 || rec.output_tokens < 1 || !(rec.arrival_ms >= 0.0) {
            return Err(WorkloadError::Parse {
                line: line_no,
                message: "prompt_tokens and output_tokens must be >= 1, arrival_ms >= 0".into(),
            });
        }
        records.push(rec);
    }
    if records.windows(2).any(|w| w[1].arrival_ms < w[0].arrival_ms) {
        warn!("trace is not sorted by arrival; sorting");
        records.sort_by(|a, b| a.arrival_ms.total_cmp(&b.arrival_ms));
    }
    Ok(records)
}

pub fn load_trace(path: &Path) -> Result<Vec<TraceRecord>, WorkloadError> {
    let file = std::fs::File::open(path).map_err(|source| WorkloadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_trace(BufReader::new(file))
}

pub fn write_trace(records: &[TraceRecord], mut out: impl std::io::Write) -> std::io::Result<()> {
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        writeln!(out)?;
    }
    Ok(())
}

/// Length sampler: a log-normal matched to mean and std, truncated to
/// `[1, 4 * p99]` by rejection.
#[derive(Debug, Clone)]
pub struct LengthSampler {
    dist: Option<LogNormal<f64>>,
    constant: u32,
    upper: f64,
}

/// Attempts before a truncated draw is clamped into range.
const MAX_REJECTIONS: usize = 64;

impl LengthSampler {
    pub fn new(stats: &LengthStats, name: &str) -> Self {
        let constant = stats.mean.round().max(1.0) as u32;
        // A P99 below the mean cannot describe a right-skewed length
        // distribution; three standard deviations stand in for it.
        let p99 = if stats.p99 < stats.mean {
            warn!(
                "{name}: p99 {} below mean {}; using mean + 3 std",
                stats.p99, stats.mean
            );
            stats.mean + 3.0 * stats.std
        } else {
            stats.p99
        };
        let upper = (4.0 * p99).max(1.0);
        if stats.std == 0.0 {
            warn!("{name}: zero std, generating constant lengths");
            return LengthSampler {
                dist: None,
                constant,
                upper,
            };
        }
        let sigma2 = (1.0 + (stats.std / stats.mean).powi(2)).ln();
        let mu = stats.mean.ln() - sigma2 / 2.0;
        LengthSampler {
            dist: LogNormal::new(mu, sigma2.sqrt()).ok(),
            constant,
            upper,
        }
    }

    pub fn upper(&self) -> u32 {
        self.upper.floor().max(1.0) as u32
    }

    pub fn sample(&self, rng: &mut impl Rng) -> u32 {
        let Some(dist) = &self.dist else {
            return self.constant;
        };
        let mut x = 0.0;
        for _ in 0..MAX_REJECTIONS {
            x = dist.sample(rng).round();
            if x >= 1.0 && x <= self.upper {
                return x as u32;
            }
        }
        x.clamp(1.0, self.upper) as u32
    }
}

/// Number of recent sessions a continuing turn may pick from.
const LIVE_SESSIONS: usize = 64;

/// Synthetic requests matching a scenario's length statistics. Arrivals are
/// left at zero; see [`assign_arrivals`].
pub fn synth_generate(stats: &ScenarioStats, n: usize, seed: u64) -> Result<Vec<TraceRecord>, WorkloadError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    synth_generate_with(stats, n, &mut rng)
}

pub fn synth_generate_with(
    stats: &ScenarioStats,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TraceRecord>, WorkloadError> {
    if n == 0 {
        return Err(WorkloadError::Config("n must be >= 1".into()));
    }
    stats.validate()?;
    let prompt = LengthSampler::new(&stats.prompt, &stats.name);
    let output = LengthSampler::new(&stats.output, &stats.name);
    let mut live: VecDeque<u64> = VecDeque::with_capacity(LIVE_SESSIONS);
    let mut next_session = 0u64;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let session_id = if !live.is_empty() && rng.random::<f64>() < stats.session_turn_prob {
            live[rng.random_range(0..live.len())]
        } else {
            let id = next_session;
            next_session += 1;
            if live.len() == LIVE_SESSIONS {
                live.pop_front();
            }
            live.push_back(id);
            id
        };
        out.push(TraceRecord {
            arrival_ms: 0.0,
            session_id,
            prompt_tokens: prompt.sample(rng),
            output_tokens: output.sample(rng),
        });
    }
    Ok(out)
}

pub fn assign_arrivals(records: &mut [TraceRecord], mode: ArrivalMode, seed: u64) -> Result<(), WorkloadError> {
    assign_arrivals_with(records, mode, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn assign_arrivals_with(
    records: &mut [TraceRecord],
    mode: ArrivalMode,
    rng: &mut ChaCha8Rng,
) -> Result<(), WorkloadError> {
    match mode {
        ArrivalMode::Timestamp { scale } => {
            if !(scale > 0.0) {
                return Err(WorkloadError::Config("timestamp scale must be > 0".into()));
            }
            let Some(origin) = records.first().map(|r| r.arrival_ms) else {
                return Ok(());
            };
            for rec in records.iter_mut() {
                rec.arrival_ms = origin + (rec.arrival_ms - origin) / scale;
            }
        }
        ArrivalMode::Qps { rate, poisson } => {
            if !(rate > 0.0 && rate.is_finite()) {
                return Err(WorkloadError::Config("qps rate must be > 0".into()));
            }
            let gap = 1000.0 / rate;
            if poisson {
                let exp = Exp::new(1.0 / gap).map_err(|e| WorkloadError::Config(e.to_string()))?;
                let mut t = 0.0;
                for rec in records.iter_mut() {
                    rec.arrival_ms = t;
                    t += exp.sample(rng);
                }
            } else {
                for (i, rec) in records.iter_mut().enumerate() {
                    rec.arrival_ms = i as f64 * gap;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(std: f64) -> ScenarioStats {
        ScenarioStats {
            name: "t".into(),
            prompt: LengthStats {
                mean: 300.0,
                p99: 900.0,
                std,
            },
            output: LengthStats {
                mean: 50.0,
                p99: 150.0,
                std,
            },
            session_turn_prob: 0.5,
        }
    }

    #[test]
    fn parse_examples() {
        assert!(parse_trace("".as_bytes()).unwrap().is_empty());
        let text = "{\"arrival_ms\":0,\"session_id\":1,\"prompt_tokens\":10,\"output_tokens\":2}\n\
                    {\"arrival_ms\":5,\"session_id\":2,\"prompt_tokens\":11}\n";
        match parse_trace(text.as_bytes()) {
            Err(WorkloadError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unsorted_input_is_sorted() {
        let text = "{\"arrival_ms\":9,\"session_id\":1,\"prompt_tokens\":1,\"output_tokens\":1}\n\
                    {\"arrival_ms\":3,\"session_id\":2,\"prompt_tokens\":1,\"output_tokens\":1}\n";
        let recs = parse_trace(text.as_bytes()).unwrap();
        assert_eq!(recs[0].arrival_ms, 3.0);
    }

    #[test]
    fn zero_std_is_constant() {
        let recs = synth_generate(&flat(0.0), 50, 1).unwrap();
        assert!(recs.iter().all(|r| r.prompt_tokens == 300 && r.output_tokens == 50));
    }

    #[test]
    fn qps_spacing() {
        let mut recs = synth_generate(&flat(10.0), 5, 1).unwrap();
        assign_arrivals(
            &mut recs,
            ArrivalMode::Qps {
                rate: 10.0,
                poisson: false,
            },
            0,
        )
        .unwrap();
        let t: Vec<f64> = recs.iter().map(|r| r.arrival_ms).collect();
        assert_eq!(t, [0.0, 100.0, 200.0, 300.0, 400.0]);
        assert!(assign_arrivals(
            &mut recs,
            ArrivalMode::Qps {
                rate: 0.0,
                poisson: false
            },
            0
        )
        .is_err());
    }

    #[test]
    fn timestamp_scale_halves_gaps() {
        let mut recs: Vec<TraceRecord> = [0.0, 100.0, 300.0]
            .iter()
            .map(|&a| TraceRecord {
                arrival_ms: a,
                session_id: 0,
                prompt_tokens: 1,
                output_tokens: 1,
            })
            .collect();
        assign_arrivals(&mut recs, ArrivalMode::Timestamp { scale: 2.0 }, 0).unwrap();
        let t: Vec<f64> = recs.iter().map(|r| r.arrival_ms).collect();
        assert_eq!(t, [0.0, 50.0, 150.0]);
    }

    #[test]
    fn arrival_mode_json() {
        let m: ArrivalMode = serde_json::from_str(r#"{"mode":"qps","rate":4}"#).unwrap();
        assert_eq!(
            m,
            ArrivalMode::Qps {
                rate: 4.0,
                poisson: false
            }
        );
        let m: ArrivalMode = serde_json::from_str(r#"{"mode":"timestamp"}"#).unwrap();
        assert_eq!(m, ArrivalMode::Timestamp { scale: 1.0 });
    }
}
