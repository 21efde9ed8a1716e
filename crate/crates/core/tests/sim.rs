use circuitsynth::circuit::{ComponentPool, DeviceKind::*, PortId, Topology};
use circuitsynth::dataset::{random_duty, random_pool, random_topology};
use circuitsynth::sim::{
    oracle, topology_network, transient, Element, Network, PeriodIntegrator, PeriodMapEngine,
    SimConfig, SimStatus, SteppedEngine,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const R: f64 = 1e3;
const C: f64 = 1e-6;
const V: f64 = 10.0;

/// Source -- R -- node 2 -- C -- ground, no switching.
fn rc_network() -> Network<f64> {
    Network {
        nodes: 2,
        elements: vec![
            Element::VoltageSource {
                pos: 1,
                neg: 0,
                v: V,
            },
            Element::Resistor { a: 1, b: 2, r: R },
            Element::Capacitor { a: 2, b: 0, c: C },
        ],
        output: 2,
        load: None,
        g_min: 0.0,
    }
}

fn rc_check<I: PeriodIntegrator<f64>>(engine: &mut I) {
    for k in 1..=2 {
        engine.next_period().unwrap();
        let v = engine.state()[0];
        let exact = V * (1.0 - (-(k as f64)).exp());
        assert!(
            (v - exact).abs() / exact < 0.01,
            "t = {k} tau: {v} vs {exact}"
        );
    }
}

#[test]
fn rc_step_response_follows_charging_law() {
    let net = rc_network();
    // One 100-step "period" spans one time constant.
    let h = R * C / 100.0;
    rc_check(&mut SteppedEngine::new(&net, h, 100, 0.5, true).unwrap());
    rc_check(&mut PeriodMapEngine::new(&net, h, 100, 0.5).unwrap());
}

fn random_cases(seed: u64, n: usize) -> Vec<(Topology, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let pool = random_pool(&mut rng);
            let t = random_topology(pool, &mut rng);
            (t, random_duty(&mut rng))
        })
        .collect()
}

#[test]
fn random_circuits_are_passive() {
    let cfg = SimConfig::default();
    let mut simulated = 0;
    for (t, duty) in random_cases(11, 500) {
        let r = transient::<f64>(&t, duty, &cfg).unwrap();
        if r.status == SimStatus::Valid || r.p_in.is_finite() {
            simulated += 1;
            assert!(
                r.p_out <= r.p_in + 1e-9,
                "p_out {} > p_in {} for {t:?}",
                r.p_out,
                r.p_in
            );
        }
    }
    assert!(simulated > 450);
}

#[test]
fn screen_rejections_transfer_no_power() {
    let cfg = SimConfig::default();
    let mut checked = 0;
    for (t, duty) in random_cases(12, 2000) {
        if t.structural_screen().connected {
            continue;
        }
        let r = transient::<f64>(&t, duty, &cfg).unwrap();
        assert!(r.p_out < 1e-6, "p_out {} for {t:?}", r.p_out);
        checked += 1;
        if checked == 500 {
            break;
        }
    }
    assert_eq!(checked, 500);
}

#[test]
fn halving_the_step_barely_moves_efficiency() {
    let coarse = SimConfig::default();
    let fine = SimConfig {
        steps_per_period: 2 * coarse.steps_per_period,
        ..SimConfig::default()
    };
    let mut checked = 0;
    for (t, duty) in random_cases(13, 4000) {
        if !t.structural_screen().connected {
            continue;
        }
        let a = oracle(&t, duty, &coarse);
        if !a.valid {
            continue;
        }
        let b = transient::<f64>(&t, duty, &fine).unwrap();
        let (ea, eb) = (a.efficiency.unwrap(), b.efficiency.unwrap());
        assert!(
            (ea - eb).abs() / ea < 0.005,
            "{ea} vs {eb} for {t:?} at duty {duty}"
        );
        checked += 1;
        if checked == 20 {
            break;
        }
    }
    assert_eq!(checked, 20);
}

#[test]
fn cached_factorization_matches_restamping_bitwise() {
    let cfg = SimConfig::default();
    for (t, duty) in random_cases(14, 6) {
        let net = topology_network::<f64>(&t, &cfg);
        let h = cfg.step();
        let mut cached = SteppedEngine::new(&net, h, cfg.steps_per_period, duty, true).unwrap();
        let mut fresh = SteppedEngine::new(&net, h, cfg.steps_per_period, duty, false).unwrap();
        for _ in 0..20 {
            let a = cached.next_period().unwrap();
            let b = fresh.next_period().unwrap();
            assert_eq!(a, b);
            let bits = |s: &[f64]| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(cached.state()), bits(fresh.state()));
        }
    }
}

#[test]
fn skipping_periods_matches_iterating_them() {
    let cfg = SimConfig::default();
    for (t, duty) in random_cases(15, 40) {
        let net = topology_network::<f64>(&t, &cfg);
        let mut jumped =
            PeriodMapEngine::new(&net, cfg.step(), cfg.steps_per_period, duty).unwrap();
        let mut walked =
            PeriodMapEngine::new(&net, cfg.step(), cfg.steps_per_period, duty).unwrap();
        jumped.skip_periods(10).unwrap();
        for _ in 0..1024 {
            walked.next_period().unwrap();
        }
        let scale = walked.state().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (a, b) in jumped.state().iter().zip(walked.state()) {
            assert!((a - b).abs() <= 1e-9 * scale, "{a} vs {b}");
        }
    }
}

#[test]
fn simulation_is_deterministic() {
    let cfg = SimConfig::default();
    for (t, duty) in random_cases(16, 30) {
        assert_eq!(
            transient::<f64>(&t, duty, &cfg).unwrap(),
            transient::<f64>(&t, duty, &cfg).unwrap()
        );
    }
}

#[test]
fn divider_fixture() {
    let pool = ComponentPool::new([Capacitor, Inductor, PhaseISwitch, PhaseIISwitch, Capacitor]);
    let t = Topology::from_groups(pool, &[&[PortId::IN, PortId::OUT]]);
    for duty in circuitsynth::sim::DUTY_CYCLES {
        let v = oracle(&t, duty, &SimConfig::default());
        assert!(v.valid);
        assert!((v.efficiency.unwrap() - 0.998004).abs() < 1e-3);
        assert!((v.v_out_avg - 99.80).abs() < 0.01);
    }
}

#[test]
fn single_precision_rc_response() {
    let net = Network::<f32> {
        nodes: 2,
        elements: vec![
            Element::VoltageSource {
                pos: 1,
                neg: 0,
                v: V as f32,
            },
            Element::Resistor {
                a: 1,
                b: 2,
                r: R as f32,
            },
            Element::Capacitor {
                a: 2,
                b: 0,
                c: C as f32,
            },
        ],
        output: 2,
        load: None,
        g_min: 0.0,
    };
    let mut engine = PeriodMapEngine::new(&net, (R * C / 100.0) as f32, 100, 0.5).unwrap();
    engine.next_period().unwrap();
    let exact = V * (1.0 - (-1.0f64).exp());
    assert!((engine.state()[0] as f64 - exact).abs() / exact < 0.01);
}
