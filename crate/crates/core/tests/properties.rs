use oid_conic::C64;
use oid_core::consensus::customer_update;
use oid_core::feeder::{region_contains, InverterSpec, OperatingPoint};
use oid_core::harness::{decode_log, encode_log, AgentId, Message, Payload};
use oid_core::scenario::{fig1_scenario, parse_scenario};
use proptest::prelude::*;

fn inverter() -> impl Strategy<Value = InverterSpec> {
    (0.0..1.0f64, 1.0..1.3f64, 0.7..0.99f64).prop_map(|(p_av, over, pf)| InverterSpec {
        s: p_av * over,
        p_av,
        theta: f64::acos(pf),
    })
}

/// Customer objective `a P² + b P + κ/2 (P² + Q²) − lin_p P − lin_q Q`.
fn customer_cost(a: f64, b: f64, kappa: f64, lp: f64, lq: f64, p: f64, q: f64) -> f64 {
    a * p * p + b * p + 0.5 * kappa * (p * p + q * q) - lp * p - lq * q
}

fn agent() -> impl Strategy<Value = AgentId> {
    prop_oneof![Just(AgentId::Utility), (0..4usize).prop_map(AgentId::Cem), (0..40usize).prop_map(AgentId::Customer)]
}

fn payload() -> impl Strategy<Value = Payload> {
    let x = || -10.0..10.0f64;
    prop_oneof![
        (x(), x()).prop_map(|(p, q)| Payload::SetpointCopy { p, q }),
        (x(), x()).prop_map(|(p, q)| Payload::SetpointValue { p, q }),
        prop::array::uniform8(x()).prop_map(|v| Payload::BorderBlock([
            [C64::new(v[0], v[1]), C64::new(v[2], v[3])],
            [C64::new(v[4], v[5]), C64::new(v[6], v[7])],
        ])),
        (x(), x(), x()).prop_map(|(p_av, p_load, q_load)| Payload::NetLoadReport { p_av, p_load, q_load }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn customer_step_is_feasible_and_beats_a_grid(
        spec in inverter(),
        a in prop_oneof![Just(0.0), 0.0..0.5f64],
        kappa in 0.01..5.0f64,
        lp in -2.0..2.0f64,
        lq in -2.0..2.0f64,
    ) {
        let b = 0.1;
        let got = customer_update(&spec, a, b, kappa, lp, lq).unwrap();
        prop_assert!(region_contains(&spec, &got, 1e-9), "{got:?} outside {spec:?}");
        let best = customer_cost(a, b, kappa, lp, lq, got.p_c, got.q_c);
        for i in 0..=40 {
            let p = spec.p_av * i as f64 / 40.0;
            let head = spec.p_av - p;
            let qmax = (spec.theta.tan() * head).min((spec.s * spec.s - head * head).max(0.0).sqrt());
            for j in -20..=20 {
                let q = qmax * j as f64 / 20.0;
                if region_contains(&spec, &OperatingPoint::new(p, q), 0.0) {
                    prop_assert!(best <= customer_cost(a, b, kappa, lp, lq, p, q) + 1e-10);
                }
            }
        }
    }

    #[test]
    fn message_log_round_trips(
        hash in prop::array::uniform32(any::<u8>()),
        msgs in prop::collection::vec((agent(), agent(), 0..1000u32, payload()), 0..30),
    ) {
        let msgs: Vec<Message> = msgs.into_iter().map(|(from, to, round, payload)| Message { from, to, round, payload }).collect();
        let bytes = encode_log(&hash, &msgs);
        let (h, back) = decode_log(&bytes).unwrap();
        prop_assert_eq!(h, hash);
        prop_assert_eq!(back, msgs);
        if !bytes.is_empty() {
            prop_assert!(decode_log(&bytes[..bytes.len() - 1]).is_err());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn scenario_json_round_trips(seed in any::<u64>(), lambda in 0.0..2.0f64) {
        let s = fig1_scenario(seed, lambda);
        let back = parse_scenario(&s.to_json()).unwrap();
        prop_assert_eq!(back, s);
    }
}
