use num_bigint::BigInt;
use proptest::prelude::*;
use servesim::learner::LatencySample;
use servesim::{goodness_of_fit, BatchShape, PerfParams};

/// Binary fixed point with `FRAC` fractional bits, evaluated in exact integer
/// arithmetic.
const FRAC: u32 = 256;

fn fixed(v: f64) -> BigInt {
    assert!(v.is_finite() && v >= 0.0);
    if v == 0.0 {
        return BigInt::from(0);
    }
    let bits = v.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let mantissa = if exp == 0 {
        (bits & ((1 << 52) - 1)) << 1
    } else {
        (bits & ((1 << 52) - 1)) | (1 << 52)
    };
    let shift = exp - 1075 + FRAC as i32;
    let m = BigInt::from(mantissa);
    if shift >= 0 {
        m << shift as u32
    } else {
        m >> (-shift) as u32
    }
}

fn one() -> BigInt {
    BigInt::from(1) << FRAC
}

fn mul(a: &BigInt, b: &BigInt) -> BigInt {
    (a * b) >> FRAC
}

fn div(a: &BigInt, b: &BigInt) -> BigInt {
    (a << FRAC) / b
}

fn exp_pos(x: &BigInt) -> BigInt {
    let mut term = one();
    let mut sum = one();
    for n in 1..2000u32 {
        term = mul(&term, x) / n;
        if term == BigInt::from(0) {
            break;
        }
        sum += &term;
    }
    sum
}

fn to_f64(v: &BigInt) -> f64 {
    let (sign, digits) = v.to_u64_digits();
    let mut acc = 0.0f64;
    for (i, d) in digits.iter().enumerate() {
        acc += *d as f64 * 2f64.powi(64 * i as i32 - FRAC as i32);
    }
    if sign == num_bigint::Sign::Minus {
        -acc
    } else {
        acc
    }
}

fn oracle_throughput(p: &PerfParams, b: u32, s: u32) -> BigInt {
    let sat = |k: f64, x: u32| one() - div(&one(), &exp_pos(&(fixed(k) * x)));
    mul(&mul(&fixed(p.p_max), &sat(p.k_b, b)), &sat(p.k_s, s))
}

fn oracle_latency(p: &PerfParams, b: u32, s: u32) -> f64 {
    let thr = oracle_throughput(p, b, s);
    let work = fixed(p.w0) + fixed(p.ws) * s;
    let t = fixed(p.tau0) + div(&work, &thr) + fixed(p.tau_b) * b + fixed(p.tau_s) * s;
    to_f64(&t)
}

fn shape(b: u32, s: u32) -> BatchShape {
    BatchShape::new(b, s).unwrap()
}

fn general() -> PerfParams {
    PerfParams {
        tau0: 4.5,
        w0: 0.3,
        ws: 1.2,
        tau_b: 0.15,
        tau_s: 0.0005,
        p_max: 20.0,
        k_b: 2.5,
        k_s: 0.025,
    }
}

#[test]
fn throughput_matches_exact_oracle() {
    let p = PerfParams {
        p_max: 10.0,
        k_b: 0.5,
        k_s: 0.01,
        ..general()
    };
    let want = to_f64(&oracle_throughput(&p, 2, 100));
    let got = p.throughput(shape(2, 100));
    assert!((got - want).abs() <= 1e-12 * want, "{got} vs {want}");
}

#[test]
fn unit_batch_latency_matches_exact_oracle() {
    let p = general();
    let want = oracle_latency(&p, 1, 1);
    let got = p.predict_latency(shape(1, 1));
    assert!((got - want).abs() <= 1e-12 * want, "{got} vs {want}");
    let closed =
        p.tau0 + (p.w0 + p.ws) / (p.p_max * (1.0 - (-p.k_b).exp()) * (1.0 - (-p.k_s).exp())) + p.tau_b + p.tau_s;
    assert!((got - closed).abs() <= 1e-9 * closed);
}

#[test]
fn saturated_model_is_linear_in_tokens() {
    let p = PerfParams {
        tau0: 5.0,
        w0: 0.0,
        ws: 1.0,
        tau_b: 0.0,
        tau_s: 0.0,
        p_max: 1.0,
        k_b: 1000.0,
        k_s: 1000.0,
    };
    assert!((p.predict_latency(shape(4, 100)) - 105.0).abs() < 1e-6);
    let p10 = PerfParams { p_max: 10.0, ..p };
    assert!((p10.throughput(shape(4, 100)) - 10.0).abs() < 1e-9);
}

#[test]
fn larger_batches_cost_more_at_fixed_tokens() {
    let p = general();
    assert!(p.predict_latency(shape(8, 2048)) > p.predict_latency(shape(2, 2048)));
}

#[test]
fn perfect_fit_scores_one() {
    let p = general();
    let samples: Vec<_> = (1..=40)
        .map(|i| {
            let sh = shape(i, i * 37);
            LatencySample::new(sh, p.predict_latency(sh), i as f64)
        })
        .collect();
    assert!((goodness_of_fit(&p, &samples).unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn noisy_fit_scores_above_095() {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let p = general();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let samples: Vec<_> = (0..1000u32)
        .map(|i| {
            let b = 1 + i % 64;
            let s = b + (i * 7919) % 8192;
            let sh = shape(b, s);
            let z: f64 = noise.sample(&mut rng);
            LatencySample::new(sh, p.predict_latency(sh) * z.exp(), i as f64)
        })
        .collect();
    assert!(goodness_of_fit(&p, &samples).unwrap() >= 0.95);
}

#[test]
fn round_trips_through_json() {
    let p = general();
    let text = serde_json::to_string(&p).unwrap();
    let back: PerfParams = serde_json::from_str(&text).unwrap();
    assert_eq!(p, back);
}

fn params_strategy() -> impl Strategy<Value = PerfParams> {
    (
        0.0..20.0f64,
        0.1..4.0f64,
        0.0..1.0f64,
        0.0..0.01f64,
        0.5..100.0f64,
        0.01..5.0f64,
        1e-4..0.5f64,
        0.0..1.0f64,
    )
        .prop_map(|(tau0, ws, tau_b, tau_s, p_max, k_b, k_s, w0_frac)| {
            let mut p = PerfParams {
                tau0,
                w0: 0.0,
                ws,
                tau_b,
                tau_s,
                p_max,
                k_b,
                k_s,
            };
            p.w0 = w0_frac * p.monotone_w0_limit();
            p
        })
}

proptest! {
    #[test]
    fn latency_increases_with_tokens(p in params_strategy(), b in 1u32..64, s in 1u32..8000, ds in 1u32..500) {
        let s = s.max(b);
        prop_assert!(p.predict_latency(shape(b, s + ds)) > p.predict_latency(shape(b, s)));
    }

    #[test]
    fn throughput_stays_below_peak(p in params_strategy(), b in 1u32..256, s in 1u32..16384) {
        let s = s.max(b);
        let thr = p.throughput(shape(b, s));
        // Mathematically strict; both factors round to 1.0 in f64 deep in saturation.
        prop_assert!(thr > 0.0 && thr <= p.p_max);
        prop_assert!(p.throughput(shape(b + 1, s + 1)) >= thr);
    }

    #[test]
    fn throughput_saturates(p in params_strategy()) {
        let b = (20.0 / p.k_b).ceil() as u32;
        let s = ((20.0 / p.k_s).ceil() as u32).max(b);
        let thr = p.throughput(shape(b, s));
        prop_assert!((p.p_max - thr) / p.p_max < 1e-6);
    }

    #[test]
    fn predictions_are_deterministic(p in params_strategy(), b in 1u32..64, s in 64u32..4096) {
        prop_assert_eq!(p.predict_latency(shape(b, s)).to_bits(), p.predict_latency(shape(b, s)).to_bits());
    }
}
