use servesim::presets;
use servesim::sim::{apply_axis, run, summary_json, sweep, write_outputs, write_sweep_csv, SweepAxis};
use servesim::RunConfig;

fn small(policy: &str, n: usize, rate: f64) -> RunConfig {
    RunConfig::from_json(&format!(
        r#"{{
            "name": "small", "seed": 11, "duration_ms": 600000,
            "slo": {{ "ttft_slo": 2000, "tpot_slo": 50 }},
            "router": {{ "policy": "round_robin" }},
            "engines": [{{ "profile": "medium", "scheduler_policy": "{policy}" }}],
            "workload": {{ "scenario": "sharegpt", "n": {n}, "arrival": {{ "mode": "qps", "rate": {rate} }} }},
            "check_invariants": true
        }}"#
    ))
    .unwrap()
}

#[test]
fn one_request_completes_under_every_policy() {
    for policy in ["lens", "prefill_priority", "static_chunked"] {
        let out = run(&small(policy, 1, 1.0)).unwrap();
        assert_eq!(out.summary.metrics.completed, 1, "{policy}");
        assert_eq!(out.records.len(), 1);
    }
}

#[test]
fn same_seed_same_bytes() {
    let cfg = small("lens", 200, 8.0);
    let a = summary_json(&run(&cfg).unwrap().summary).unwrap();
    let b = summary_json(&run(&cfg).unwrap().summary).unwrap();
    assert_eq!(a, b);
    let mut other = cfg.clone();
    other.seed += 1;
    assert_ne!(a, summary_json(&run(&other).unwrap().summary).unwrap());
}

#[test]
fn invalid_config_is_rejected_before_running() {
    let mut cfg = small("lens", 10, 1.0);
    cfg.engines.clear();
    assert!(run(&cfg).is_err());
    let mut cfg = small("lens", 10, 1.0);
    cfg.duration_ms = 0.0;
    assert!(run(&cfg).is_err());
    assert!(RunConfig::from_json(r#"{"engines": [{"profile": "nope"}]}"#).is_err());
}

#[test]
fn rate_sweep_writes_one_row_per_value() {
    let values: Vec<String> = ["1", "2", "4"].iter().map(|s| s.to_string()).collect();
    let rows = sweep(&small("lens", 60, 1.0), SweepAxis::Rate, &values);
    let mut buf = Vec::new();
    write_sweep_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(rows.iter().all(|r| r.error.is_none()));
}

#[test]
fn policy_sweep_shares_arrivals() {
    let values: Vec<String> = ["lens", "prefill_priority", "static_chunked"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = sweep(&small("lens", 150, 5.0), SweepAxis::Policy, &values);
    let hashes: Vec<_> = rows
        .iter()
        .map(|r| r.arrival_hash.clone().unwrap_or_else(|| panic!("{:?}", r.error)))
        .collect();
    assert!(hashes.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn bad_axis_value_is_recorded_not_fatal() {
    let values = vec!["lens".to_string(), "bogus".to_string()];
    let rows = sweep(&small("lens", 20, 5.0), SweepAxis::Policy, &values);
    assert!(rows[0].error.is_none());
    assert!(rows[1].error.is_some());
    assert!(apply_axis(&small("lens", 20, 5.0), SweepAxis::Rate, "-1").is_err());
}

#[test]
fn budget_sweep_trades_ttft_for_tpot() {
    let mut cfg = small("static_chunked", 400, 3.0);
    cfg.workload.scenario = Some("summarization".into());
    let values: Vec<String> = ["256", "1024", "4096"].iter().map(|s| s.to_string()).collect();
    let rows = sweep(&cfg, SweepAxis::Budget, &values);
    let ttft: Vec<f64> = rows.iter().map(|r| r.mean_ttft.unwrap()).collect();
    let tpot: Vec<f64> = rows.iter().map(|r| r.mean_tpot.unwrap()).collect();
    assert!(ttft[0] > ttft[2], "{ttft:?}");
    assert!(tpot[0] < tpot[2], "{tpot:?}");
}

#[test]
fn outputs_are_written() {
    let cfg = small("lens", 30, 5.0);
    let out = run(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_outputs(&out, &cfg, dir.path()).unwrap();
    let summary = std::fs::read_to_string(dir.path().join("summary.json")).unwrap();
    assert_eq!(summary.trim_end(), summary_json(&out.summary).unwrap());
    let csv = std::fs::read_to_string(dir.path().join("requests.csv")).unwrap();
    assert_eq!(csv.lines().count(), 31);
}

#[test]
fn every_preset_runs() {
    for name in presets::run_preset_names() {
        let mut cfg = presets::run_preset(name).unwrap();
        cfg.workload.n = Some(40);
        let out = run(&cfg).unwrap();
        assert_eq!(out.summary.metrics.submitted, 40, "{name}");
    }
}

#[test]
fn prism_beats_round_robin_on_heterogeneous_cluster() {
    let cfg = presets::run_preset("heterogeneous-4").unwrap();
    let values = vec!["prism".to_string(), "round_robin".to_string()];
    let rows = sweep(&cfg, SweepAxis::Policy, &values);
    assert!(rows[0].slo_attainment.unwrap() >= rows[1].slo_attainment.unwrap());
}
