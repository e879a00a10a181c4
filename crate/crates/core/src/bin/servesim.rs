use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info};

use servesim::learner::LatencySample;
use servesim::sim::{self, RunConfig, SweepAxis};
use servesim::workload::{self, ArrivalMode};
use servesim::{goodness_of_fit, presets, PerfParams, SimError};

#[derive(Parser)]
#[command(name = "servesim", version, about = "LLM serving cluster simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write summary.json and requests.csv.
    Run {
        /// Run config JSON, or `preset:<name>` for a built-in preset.
        #[arg(long)]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run one simulation per axis value and print a CSV table.
    Sweep {
        #[arg(long)]
        config: String,
        /// rate | policy | budget
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a latency model against observed step latencies.
    ValidateModel {
        /// PerfParams JSON file.
        #[arg(long)]
        params: PathBuf,
        /// JSONL of {"shape": {"b", "s"}, "observed_ms", "sim_time"}.
        #[arg(long)]
        samples: PathBuf,
    },
    /// Write a synthetic trace from a built-in scenario.
    GenTrace {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Mean arrival rate (requests/s) of the Poisson arrival process.
        #[arg(long, default_value_t = 1.0)]
        rate: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(spec: &str) -> Result<RunConfig, SimError> {
    match spec.strip_prefix("preset:") {
        Some(name) => presets::run_preset(name).ok_or_else(|| {
            SimError::Config(format!(
                "unknown preset {name:?}; available: {}",
                presets::run_preset_names().join(", ")
            ))
        }),
        None => RunConfig::from_file(Path::new(spec)),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, SimError> {
    File::create(path).map(BufWriter::new).map_err(|source| SimError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn execute(cmd: Command) -> Result<(), SimError> {
    match cmd {
        Command::Run { config, seed, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let output = sim::run(&cfg)?;
            sim::write_outputs(&output, &cfg, &out)?;
            let m = &output.summary.metrics;
            info!("wrote results to {}", out.display());
            println!(
                "completed {}/{} requests, SLO attainment {:.2}%, p50 e2e {:.1} ms",
                m.completed,
                m.submitted,
                m.slo_attainment,
                m.p50_e2e.unwrap_or(f64::NAN)
            );
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
        } => {
            let cfg = load_config(&config)?;
            let rows = sim::sweep(&cfg, axis, &values);
            for row in rows.iter().filter(|r| r.error.is_some()) {
                error!(
                    "{} = {}: {}",
                    format!("{axis:?}").to_lowercase(),
                    row.value,
                    row.error.as_deref().unwrap_or("")
                );
            }
            match out {
                Some(path) => sim::write_sweep_csv(&rows, create(&path)?)?,
                None => sim::write_sweep_csv(&rows, std::io::stdout().lock())?,
            }
        }
        Command::ValidateModel { params, samples } => {
            let text = std::fs::read_to_string(&params).map_err(|source| SimError::Io {
                path: params.clone(),
                source,
            })?;
            let params: PerfParams = serde_json::from_str(&text)?;
            params.validate()?;
            let text = std::fs::read_to_string(&samples).map_err(|source| SimError::Io {
                path: samples.clone(),
                source,
            })?;
            let mut data = Vec::new();
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let sample: LatencySample =
                    serde_json::from_str(line).map_err(|e| SimError::Config(format!("samples line {}: {e}", i + 1)))?;
                data.push(sample);
            }
            let r2 = goodness_of_fit(&params, &data)?;
            println!("{r2:.6}");
        }
        Command::GenTrace {
            scenario,
            n,
            seed,
            rate,
            out,
        } => {
            let stats = presets::scenario(&scenario).ok_or_else(|| {
                SimError::Config(format!(
                    "unknown scenario {scenario:?}; available: {}",
                    presets::scenario_names().join(", ")
                ))
            })?;
            let mut records = workload::synth_generate(&stats, n, seed)?;
            workload::assign_arrivals(&mut records, ArrivalMode::Qps { rate, poisson: true }, seed)?;
            let mut w = create(&out)?;
            let io = |source| SimError::Io {
                path: out.clone(),
                source,
            };
            writeln!(
                w,
                "# synthetic trace generated from {scenario} length statistics (n={n}, seed={seed}, rate={rate}/s); not real traffic"
            )
            .map_err(io)?;
            workload::write_trace(&records, &mut w).map_err(io)?;
            w.flush().map_err(io)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
