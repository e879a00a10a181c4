use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use servesim::engine::{oracle_latency, schedule_baseline, Engine, EngineConfig, SchedulerPolicy};
use servesim::learner::LearnerConfig;
use servesim::lens::{AllocationKind, Request, RequestState, SchedulerConfig, SloSpec};
use servesim::{BatchShape, PerfParams};

const SLO: SloSpec = SloSpec {
    ttft_slo: 2000.0,
    tpot_slo: 50.0,
};

fn truth() -> PerfParams {
    PerfParams {
        tau0: 4.5,
        w0: 0.0,
        ws: 1.0,
        tau_b: 0.15,
        tau_s: 0.0005,
        p_max: 20.0,
        k_b: 2.5,
        k_s: 0.025,
    }
}

fn config(policy: SchedulerPolicy, kv_blocks: u32) -> EngineConfig {
    serde_json::from_value(serde_json::json!({
        "engine_id": 0,
        "true_params": truth(),
        "kv_blocks": kv_blocks,
        "scheduler_policy": policy,
    }))
    .unwrap()
}

fn engine(cfg: EngineConfig) -> Engine {
    let mut e = Engine::with_seed(cfg, &SchedulerConfig::default(), SLO, LearnerConfig::default(), 7);
    e.set_strict(true);
    e
}

fn running(id: u64) -> Request {
    let mut r = Request::new(id, id, 16, 64, 0.0);
    r.prefilled = 16;
    r.decoded = 1;
    r.state = RequestState::Running;
    r
}

#[test]
fn noiseless_oracle_is_the_model() {
    let cfg = EngineConfig {
        noise_sigma: 0.0,
        ..config(SchedulerPolicy::Lens, 1024)
    };
    let shape = BatchShape::new(4, 900).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(oracle_latency(&cfg, shape, &mut rng), truth().predict_latency(shape));
}

#[test]
fn oracle_noise_is_seeded_and_calibrated() {
    let cfg = config(SchedulerPolicy::Lens, 1024);
    let shape = BatchShape::new(8, 2048).unwrap();
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..10_000)
            .map(|_| oracle_latency(&cfg, shape, &mut rng))
            .collect::<Vec<_>>()
    };
    let a = draw(3);
    assert_eq!(a, draw(3));
    let base = truth().predict_latency(shape);
    let logs: Vec<f64> = a.iter().map(|v| (v / base).ln()).collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    let std = (logs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (logs.len() - 1) as f64).sqrt();
    assert!((std - 0.05).abs() <= 0.005, "{std}");
}

#[test]
fn admission_credits_resident_prefix() {
    let mut e = engine(config(SchedulerPolicy::StaticChunked, 4096));
    assert_eq!(e.admit(Request::new(1, 77, 3900, 100, 0.0)), Ok(0));
    assert_eq!(e.wait_queue().len(), 1);
    let mut now = 0.0;
    while e.has_work() {
        now += e.step(now).unwrap().unwrap().actual_ms;
    }
    assert_eq!(e.admit(Request::new(2, 77, 4089, 10, now)), Ok(4000));
    assert_eq!(e.wait_queue()[0].prefilled, 4000);
    assert_eq!(e.admit(Request::new(3, 78, 500, 10, now)), Ok(0));
}

#[test]
fn evicted_prefix_is_not_credited() {
    // 64 blocks of 16 tokens: the second session's footprint forces the first's prefix out.
    let mut e = engine(config(SchedulerPolicy::StaticChunked, 64));
    e.admit(Request::new(1, 5, 500, 10, 0.0)).unwrap();
    let mut now = 0.0;
    while e.has_work() {
        now += e.step(now).unwrap().unwrap().actual_ms;
    }
    e.admit(Request::new(2, 6, 900, 10, now)).unwrap();
    while e.has_work() {
        now += e.step(now).unwrap().unwrap().actual_ms;
    }
    assert!(e.kv().evictions() > 0);
    assert_eq!(e.admit(Request::new(3, 5, 600, 10, now)), Ok(0));
}

#[test]
fn idle_engine_does_nothing() {
    let mut e = engine(config(SchedulerPolicy::Lens, 128));
    assert_eq!(e.step(0.0).unwrap(), None);
    assert!(!e.is_busy());
}

#[test]
fn single_chunk_prefill_emits_first_token() {
    let mut e = engine(config(SchedulerPolicy::StaticChunked, 128));
    e.admit(Request::new(9, 9, 256, 4, 0.0)).unwrap();
    let out = e.step(0.0).unwrap().unwrap();
    assert_eq!((out.plan.b, out.plan.s), (1, 256));
    assert_eq!(out.first_tokens, vec![9]);
    assert!(out.actual_ms > 0.0);
    assert_eq!(e.run_queue()[0].first_token_at, Some(out.actual_ms));
}

#[test]
fn kv_pressure_trims_admissions_not_decodes() {
    // A needs 6 blocks, B and C 17 each; 33 blocks fit A and B only.
    let mut e = engine(config(SchedulerPolicy::StaticChunked, 33));
    e.admit(Request::new(1, 1, 32, 50, 0.0)).unwrap();
    let mut now = e.step(0.0).unwrap().unwrap().actual_ms;
    assert_eq!(e.run_queue().len(), 1);
    e.admit(Request::new(2, 2, 256, 16, now)).unwrap();
    e.admit(Request::new(3, 3, 256, 16, now)).unwrap();
    let out = e.step(now).unwrap().unwrap();
    now += out.actual_ms;
    let kinds: Vec<_> = out.plan.allocations.iter().map(|a| (a.request_id, a.kind)).collect();
    assert_eq!(kinds, vec![(1, AllocationKind::Decode), (2, AllocationKind::Prefill)]);
    assert_eq!(e.stats().trimmed_admissions, 1);
    assert_eq!(e.wait_queue()[0].id, 3);
    assert_eq!(e.wait_queue()[0].prefilled, 0);
    assert!(now > 0.0);
}

#[test]
fn exported_state_examples() {
    let mut cfg = config(SchedulerPolicy::StaticChunked, 625);
    cfg.initial_l_bar = 200.0;
    let mut e = engine(cfg);
    let sv = e.export_state(0.0);
    assert_eq!((sv.l_hat, sv.w_load, sv.m_free), (0.0, 0.0, 10_000.0));
    assert_eq!(sv.p_max, e.learner().params().effective_token_rate());

    e.admit(Request::new(1, 1, 100, 10, 0.0)).unwrap();
    let sv = e.export_state(0.0);
    assert_eq!(sv.m_free, 9_700.0);
    assert_eq!(sv.w_load, 100.0 + 32.0);

    e.begin_step(0.0).unwrap().unwrap();
    let predicted = e.learner().params().predict_latency(BatchShape::new(1, 100).unwrap());
    assert!(predicted > 15.0);
    assert!((e.export_state(15.0).l_hat - (predicted - 15.0)).abs() < 1e-9);
    assert_eq!(e.export_state(predicted + 1.0).l_hat, 0.0);
}

#[test]
fn baseline_examples() {
    let run: Vec<_> = (0..5).map(running).collect();
    let wait = vec![Request::new(10, 10, 300, 5, 1.0), Request::new(11, 11, 400, 5, 2.0)];
    let plan = schedule_baseline(SchedulerPolicy::PrefillPriority, &wait, &run, 8192, 256, 512);
    assert_eq!(plan.s, 700);
    assert!(plan.allocations.iter().all(|a| a.kind == AllocationKind::Prefill));

    let wait = vec![Request::new(10, 10, 1000, 5, 1.0)];
    let plan = schedule_baseline(SchedulerPolicy::StaticChunked, &wait, &run[..3], 8192, 256, 512);
    let tokens: Vec<u32> = plan.allocations.iter().map(|a| a.tokens).collect();
    assert_eq!(tokens, vec![1, 1, 1, 509]);

    for policy in [SchedulerPolicy::PrefillPriority, SchedulerPolicy::StaticChunked] {
        assert!(schedule_baseline(policy, &[], &[], 8192, 256, 512).is_empty());
    }
}

#[test]
fn strict_run_keeps_invariants() {
    let mut e = engine(config(SchedulerPolicy::Lens, 512));
    for i in 0..40u64 {
        e.admit(Request::new(
            i,
            i % 7,
            50 + (i as u32 * 37) % 600,
            1 + (i as u32 * 13) % 90,
            0.0,
        ))
        .unwrap();
    }
    let mut now = 0.0;
    let mut finished = 0;
    while e.has_work() {
        let out = e.step(now).unwrap().expect("work remains");
        now += out.actual_ms;
        finished += out.finished.len();
        e.check_invariants().unwrap();
        assert!(e.kv().used_blocks() <= e.kv().kv_blocks());
    }
    assert_eq!(finished, 40);
}
