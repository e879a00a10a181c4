use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use servesim::learner::{convergence_error, FitEvent, LatencySample, LearnerConfig, LearnerState};
use servesim::{goodness_of_fit, BatchShape, PerfParams};

fn truth() -> PerfParams {
    PerfParams {
        tau0: 4.5,
        w0: 0.0,
        ws: 1.0,
        tau_b: 0.15,
        tau_s: 0.0005,
        p_max: 20.0,
        k_b: 0.6,
        k_s: 0.004,
    }
}

fn samples(p: &PerfParams, n: usize, sigma: f64, seed: u64) -> Vec<LatencySample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma.max(1e-300)).unwrap();
    (0..n)
        .map(|i| {
            let b = rng.random_range(1..=64u32);
            let s = rng.random_range(b..=8192u32);
            let shape = BatchShape::new(b, s).unwrap();
            let z: f64 = if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            LatencySample::new(shape, p.predict_latency(shape) * z.exp(), i as f64)
        })
        .collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

fn linear_distance(p: &PerfParams, t: &PerfParams) -> f64 {
    let pairs = [(p.tau0, t.tau0), (p.ws, t.ws), (p.tau_b, t.tau_b), (p.tau_s, t.tau_s)];
    pairs.iter().map(|&(a, b)| rel(a, b)).sum::<f64>() + p.w0.abs()
}

#[test]
fn linear_tier_recovers_exact_coefficients() {
    let t = PerfParams { w0: 0.01, ..truth() };
    let structure_only = PerfParams {
        tau0: 50.0,
        w0: 0.0,
        ws: 3.0,
        tau_b: 0.0,
        tau_s: 0.0,
        ..t
    };
    let mut st = LearnerState::new(LearnerConfig::default(), structure_only);
    for s in samples(&t, 64, 0.0, 1) {
        st.push_sample(s);
    }
    let fit = st.update_linear();
    assert!(fit.events.is_empty(), "{:?}", fit.events);
    let p = fit.params;
    for (got, want) in [
        (p.tau0, t.tau0),
        (p.w0, t.w0),
        (p.ws, t.ws),
        (p.tau_b, t.tau_b),
        (p.tau_s, t.tau_s),
    ] {
        assert!(rel(got, want) < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn first_linear_refit_moves_toward_truth() {
    let t = truth();
    let start = PerfParams {
        tau0: 9.0,
        ws: 1.7,
        tau_b: 0.4,
        tau_s: 0.004,
        ..t
    };
    let mut st = LearnerState::new(LearnerConfig::default(), start);
    let before = linear_distance(&st.params(), &t);
    let mut linear_runs = 0;
    for s in samples(&t, 32, 0.05, 2) {
        let report = st.record_sample(s);
        linear_runs += report.linear.is_some() as u32;
    }
    assert_eq!(linear_runs, 1);
    assert!(linear_distance(&st.params(), &t) < before);
}

#[test]
fn structural_fit_recovers_peak_throughput() {
    let t = truth();
    let cfg = LearnerConfig {
        min_structural_samples: 2000,
        ..LearnerConfig::default()
    };
    let mut st = LearnerState::new(cfg, PerfParams::ZERO_CONFIG_PRIOR);
    for s in samples(&t, 2000, 0.0, 3) {
        st.push_sample(s);
    }
    let fit = st.update_structural();
    assert!(fit.sse_after <= fit.sse_before);
    assert!(rel(fit.params.p_max, t.p_max) < 0.05, "{:?}", fit.params);
}

#[test]
fn saturated_window_keeps_priors() {
    let t = truth();
    let prior = PerfParams::ZERO_CONFIG_PRIOR;
    let cfg = LearnerConfig {
        min_structural_samples: 300,
        ..LearnerConfig::default()
    };
    let mut st = LearnerState::new(cfg, prior);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // kB*b >= 20 and kS*s >= 20 under both the truth and the prior.
    for i in 0..300 {
        let b = rng.random_range(200..=256u32);
        let s = rng.random_range(20_000..=40_000u32);
        let shape = BatchShape::new(b, s).unwrap();
        st.push_sample(LatencySample::new(shape, t.predict_latency(shape), i as f64));
    }
    let fit = st.update_structural();
    assert!(fit.events.contains(&FitEvent::LowIdentifiability), "{:?}", fit.events);
    assert_eq!(
        (fit.params.k_b, fit.params.k_s, fit.params.p_max),
        (prior.k_b, prior.k_s, prior.p_max)
    );
}

#[test]
fn noisy_fit_generalises_to_held_out_samples() {
    let t = truth();
    let cfg = LearnerConfig {
        min_structural_samples: 2000,
        ..LearnerConfig::default()
    };
    let mut st = LearnerState::new(cfg, PerfParams::ZERO_CONFIG_PRIOR);
    for s in samples(&t, 2000, 0.05, 5) {
        st.push_sample(s);
    }
    st.update_structural();
    let held_out = samples(&t, 500, 0.05, 6);
    let r2 = goodness_of_fit(&st.params(), &held_out).unwrap();
    assert!(r2 >= 0.95, "R² {r2}");
}

#[test]
fn combined_updates_converge_on_noiseless_stream() {
    let t = truth();
    let mut st = LearnerState::new(LearnerConfig::default(), PerfParams::ZERO_CONFIG_PRIOR);
    let probe = samples(&t, 200, 0.0, 7);
    let mut converged_at = None;
    for (i, s) in samples(&t, 3000, 0.0, 8).into_iter().enumerate() {
        let report = st.record_sample(s);
        if report.linear.is_some() && converged_at.is_none() && st.convergence_error(&probe) < 0.02 {
            converged_at = Some(i + 1);
        }
    }
    assert!(converged_at.is_some(), "final error {}", st.convergence_error(&probe));
    assert!(st.convergence_error(&probe) < 0.02);
}

#[test]
fn convergence_error_on_a_mid_training_snapshot() {
    let t = truth();
    let mut st = LearnerState::new(LearnerConfig::default(), PerfParams::ZERO_CONFIG_PRIOR);
    for s in samples(&t, 64, 0.05, 9) {
        st.record_sample(s);
    }
    let probe = samples(&t, 20, 0.0, 10);
    let p = st.params();
    let by_hand = probe
        .iter()
        .map(|s| (p.predict_latency(s.shape) - s.observed_ms).abs() / s.observed_ms)
        .sum::<f64>()
        / probe.len() as f64;
    assert!((st.convergence_error(&probe) - by_hand).abs() < 1e-12);
    assert_eq!(convergence_error(&t, &probe), 0.0);
}

#[test]
fn snapshots_stay_valid_under_adversarial_noise() {
    let t = truth();
    let mut st = LearnerState::new(LearnerConfig::default(), PerfParams::ZERO_CONFIG_PRIOR);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (i, s) in samples(&t, 3000, 0.0, 12).into_iter().enumerate() {
        let garbage = s.observed_ms * rng.random_range(0.05..20.0);
        st.record_sample(LatencySample::new(s.shape, garbage, i as f64));
        assert!(st.params().validate().is_ok());
        assert!(st.buffer().len() <= st.config().long_window);
    }
}

#[test]
fn dump_round_trips_through_json() {
    let mut st = LearnerState::new(LearnerConfig::default(), PerfParams::ZERO_CONFIG_PRIOR);
    for s in samples(&truth(), 100, 0.05, 13) {
        st.record_sample(s);
    }
    let dump = st.dump();
    let text = serde_json::to_string(&dump).unwrap();
    assert_eq!(
        serde_json::from_str::<servesim::learner::LearnerDump>(&text).unwrap(),
        dump
    );
    assert_eq!(dump.samples_seen, 100);
}
