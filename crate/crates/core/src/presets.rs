//! Built-in scenarios, hardware profiles and run configurations.
//!
//! All presets are JSON files under `presets/` embedded at compile time.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::SimError;
use crate::perf_model::PerfParams;
use crate::sim::RunConfig;
use crate::workload::ScenarioStats;

const SCENARIOS: &[(&str, &str)] = &[
    ("flowgpt", include_str!("../presets/scenarios/flowgpt.json")),
    ("coding", include_str!("../presets/scenarios/coding.json")),
    ("sharegpt", include_str!("../presets/scenarios/sharegpt.json")),
    ("summarization", include_str!("../presets/scenarios/summarization.json")),
];

const HARDWARE: &[(&str, &str)] = &[
    ("fast", include_str!("../presets/hardware/fast.json")),
    ("medium", include_str!("../presets/hardware/medium.json")),
    ("slow", include_str!("../presets/hardware/slow.json")),
];

const RUNS: &[(&str, &str)] = &[
    ("homogeneous-8", include_str!("../presets/runs/homogeneous-8.json")),
    ("heterogeneous-4", include_str!("../presets/runs/heterogeneous-4.json")),
    ("zero-config", include_str!("../presets/runs/zero-config.json")),
    ("summarization", include_str!("../presets/runs/summarization.json")),
];

/// Ground-truth latency model and memory of one accelerator class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub name: String,
    pub params: PerfParams,
    pub kv_blocks: u32,
    pub block_size: u32,
}

fn lookup(table: &[(&str, &'static str)], name: &str) -> Option<&'static str> {
    table.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

pub fn scenario_names() -> Vec<&'static str> {
    SCENARIOS.iter().map(|(n, _)| *n).collect()
}

pub fn scenario(name: &str) -> Option<ScenarioStats> {
    lookup(SCENARIOS, name).map(|t| serde_json::from_str(t).expect("embedded scenario parses"))
}

pub fn hardware_names() -> Vec<&'static str> {
    HARDWARE.iter().map(|(n, _)| *n).collect()
}

pub fn hardware(name: &str) -> Option<HardwareProfile> {
    lookup(HARDWARE, name).map(|t| serde_json::from_str(t).expect("embedded profile parses"))
}

pub fn run_preset_names() -> Vec<&'static str> {
    RUNS.iter().map(|(n, _)| *n).collect()
}

pub fn run_preset(name: &str) -> Option<RunConfig> {
    lookup(RUNS, name).map(|t| RunConfig::from_json(t).expect("embedded run preset is valid"))
}

/// Expands engine entries of a raw run config: a missing `engine_id` becomes
/// the entry's index, and `"profile": "<name>"` supplies `true_params`,
/// `kv_blocks` and `block_size` unless they are given explicitly.
pub fn expand_config(value: &mut Value) -> Result<(), SimError> {
    let Some(engines) = value.get_mut("engines").and_then(Value::as_array_mut) else {
        return Ok(());
    };
    for (i, engine) in engines.iter_mut().enumerate() {
        let Some(obj) = engine.as_object_mut() else {
            continue;
        };
        obj.entry("engine_id").or_insert(Value::from(i));
        if let Some(profile) = obj.remove("profile") {
            let name = profile
                .as_str()
                .ok_or_else(|| SimError::Config("engine profile must be a string".into()))?;
            let hw = hardware(name).ok_or_else(|| SimError::Config(format!("unknown hardware profile {name:?}")))?;
            obj.entry("true_params").or_insert(serde_json::to_value(hw.params)?);
            obj.entry("kv_blocks").or_insert(Value::from(hw.kv_blocks));
            obj.entry("block_size").or_insert(Value::from(hw.block_size));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_parses() {
        for n in scenario_names() {
            scenario(n).unwrap().validate().unwrap();
        }
        for n in hardware_names() {
            hardware(n).unwrap().params.validate().unwrap();
        }
        for n in run_preset_names() {
            run_preset(n).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn profiles_scale_peak_throughput() {
        let p = |n| hardware(n).unwrap().params.p_max;
        assert_eq!(p("fast") / p("slow"), 4.0);
        assert_eq!(p("medium") / p("slow"), 2.0);
    }
}
