use std::time::Instant;

use h2margin_core::capability::q_envelope;
use h2margin_core::network::{build_admittance, ieee39, two_bus, ElectrolyzerRecord, NetworkCase};
use h2margin_core::powerflow::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn point_from(case: &NetworkCase, v: Vec<f64>, theta: Vec<f64>, pg: Vec<f64>, qg: Vec<f64>) -> OperatingPoint {
    OperatingPoint {
        v,
        theta,
        pg,
        qg,
        pw: vec![0.0; case.wind_farms.len()],
        qw: vec![0.0; case.wind_farms.len()],
        ph: vec![0.0; case.electrolyzers.len()],
        qh: vec![0.0; case.electrolyzers.len()],
        point_class: PointClass::Cop,
        hour: 0,
    }
}

fn bare39() -> NetworkCase {
    let mut case = ieee39();
    case.wind_farms.clear();
    case.electrolyzers.clear();
    case
}

#[test]
fn flat_network_without_injections_has_zero_mismatch() {
    let case = two_bus(0.1, 0.0, 0.0);
    let y = build_admittance(&case);
    let p = point_from(&case, vec![1.0; 2], vec![0.0; 2], vec![0.0], vec![0.0]);
    let d = Dispatch::base_case(&case).demand;
    let (dp, dq) = mismatch(&case, &y, &p, &d);
    assert!(dp.iter().chain(&dq).all(|r| r.abs() < 1e-12));
}

#[test]
fn two_bus_angle_carries_one_per_unit() {
    let case = two_bus(0.1, 1.0, 0.0);
    let y = build_admittance(&case);
    let theta = -(0.1f64).asin();
    assert!((theta.to_degrees() + 5.739).abs() < 1e-3);
    let p = point_from(&case, vec![1.0; 2], vec![0.0, theta], vec![1.0], vec![0.0]);
    let (dp, _) = mismatch(&case, &y, &p, &Dispatch::base_case(&case).demand);
    assert!(dp[1].abs() < 1e-9, "receiving-end residual {}", dp[1]);
    assert!(dp[0].abs() < 1e-9, "sending-end residual {}", dp[0]);

    let (sf, st) = branch_flows(&case, &p, 0);
    assert!((sf.re - 1.0).abs() < 1e-9);
    assert!((st.re + 1.0).abs() < 1e-9);
    // Lossless line: reactive absorption equals I²X with |I| = 2 sin(θ/2)/X.
    let i = 2.0 * (theta / 2.0).sin().abs() / 0.1;
    assert!((sf.im + st.im - i * i * 0.1).abs() < 1e-9);
    let s = branch_apparent_flow(&case, &p, 0);
    assert!((s - sf.norm().max(st.norm())).abs() < 1e-15);
    assert!(s > 1.0 && s < 1.01);
}

#[test]
fn reversing_a_branch_leaves_the_checked_flow_unchanged() {
    let case = ieee39();
    let y = build_admittance(&case);
    let res = newton_solve(&case, &y, &Dispatch::base_case(&case), &PowerFlowOptions::default()).unwrap();
    for k in 0..case.branches.len() {
        let mut rev = case.clone();
        let br = &mut rev.branches[k];
        if br.tap != 1.0 {
            continue;
        }
        std::mem::swap(&mut br.from_bus, &mut br.to_bus);
        let a = branch_apparent_flow(&case, &res.point, k);
        let b = branch_apparent_flow(&rev, &res.point, k);
        assert!((a - b).abs() < 1e-12, "branch {k}: {a} vs {b}");
    }
}

#[test]
fn open_branch_carries_nothing() {
    let mut case = ieee39();
    case.branches[5].in_service = false;
    let p = point_from(
        &case,
        vec![1.02; 39],
        (0..39).map(|b| -0.01 * b as f64).collect(),
        vec![0.0; 10],
        vec![0.0; 10],
    );
    assert_eq!(branch_apparent_flow(&case, &p, 5), 0.0);
}

#[test]
fn ieee39_flat_start_converges_quickly() {
    let case = bare39();
    let y = build_admittance(&case);
    let opts = PowerFlowOptions {
        enforce_q_limits: false,
        ..Default::default()
    };
    let res = newton_solve(&case, &y, &Dispatch::base_case(&case), &opts).unwrap();
    assert!(res.iterations <= 10, "{} iterations", res.iterations);
    let demand = Dispatch::base_case(&case).demand;
    assert!(max_mismatch(&case, &y, &res.point, &demand) < 1e-8);
    assert_eq!(res.point.theta[case.slack_bus()], 0.0);
    // Slack output lands near the published base-case value.
    let slack = case.slack_generator();
    assert!((res.point.pg[slack] * 100.0 - 677.871).abs() < 1.0, "{}", res.point.pg[slack] * 100.0);
}

#[test]
fn ieee39_with_reactive_limits_respects_envelopes() {
    let case = bare39();
    let y = build_admittance(&case);
    let res = newton_solve(&case, &y, &Dispatch::base_case(&case), &PowerFlowOptions::default()).unwrap();
    assert!(res.max_mismatch < 1e-8);
    for (g, gen) in case.generators.iter().enumerate() {
        let env = q_envelope(res.point.pg[g], res.point.v[gen.bus], gen).unwrap();
        let q = res.point.qg[g];
        match res.modes[g] {
            GenMode::Regulating => assert!(q <= env.q_max + 1e-9 && q >= env.q_min - 1e-9),
            GenMode::AtUpper => assert!((q - env.q_max).abs() < 1e-8),
            GenMode::AtLower => assert!((q - env.q_min).abs() < 1e-8),
        }
    }
}

#[test]
fn tenfold_demand_fails_to_solve() {
    let case = bare39();
    let y = build_admittance(&case);
    let mut d = Dispatch::base_case(&case);
    for b in 0..39 {
        d.demand.p[b] *= 10.0;
        d.demand.q[b] *= 10.0;
    }
    let err = newton_solve(&case, &y, &d, &PowerFlowOptions::default()).unwrap_err();
    assert!(matches!(err, PowerFlowError::NonConvergence { .. } | PowerFlowError::Singular | PowerFlowError::Capability(_)), "{err:?}");
}

#[test]
fn zero_demand_gives_flat_profile() {
    let case = two_bus(0.25, 0.0, 0.0);
    let y = build_admittance(&case);
    let res = newton_solve(&case, &y, &Dispatch::base_case(&case), &PowerFlowOptions::default()).unwrap();
    assert!(res.point.v.iter().all(|v| (v - 1.0).abs() < 1e-10));
    assert!(res.point.theta.iter().all(|t| t.abs() < 1e-10));
    assert!(res.point.pg[0].abs() < 1e-10);
}

fn nose_case() -> NetworkCase {
    let mut case = two_bus(0.25, 1.0, 0.0);
    case.buses[1].v_min = 0.05;
    case.buses[1].v_max = 1.5;
    case
}

#[test]
fn two_bus_nose_matches_closed_form() {
    let case = nose_case();
    let y = build_admittance(&case);
    let start = Instant::now();
    let curve = cpf_loading_margin(&case, &y, &Dispatch::base_case(&case), &Growth::from_case(&case), &CpfOptions::default()).unwrap();
    assert!(start.elapsed().as_secs_f64() < 1.0);
    assert_eq!(curve.stop, StopReason::NosePoint);
    assert!((curve.lambda_max - 1.0).abs() < 1e-2, "lambda_max {}", curve.lambda_max);
    // Nose voltage of a unity-pf load behind a reactance is 1/sqrt(2).
    let last = curve.samples.last().unwrap();
    assert!((last.v_monitored - 0.5f64.sqrt()).abs() < 0.05, "{}", last.v_monitored);
}

#[test]
fn static_demand_is_an_unbounded_direction() {
    let case = nose_case();
    let y = build_admittance(&case);
    let curve = cpf_loading_margin(&case, &y, &Dispatch::base_case(&case), &Growth::none(&case), &CpfOptions::default()).unwrap();
    assert_eq!(curve.stop, StopReason::Unbounded);
    assert!(curve.lambda_max.is_infinite());
}

#[test]
fn voltage_floor_stops_the_trace_before_the_nose() {
    let case = two_bus(0.25, 1.0, 0.0);
    let y = build_admittance(&case);
    let curve = cpf_loading_margin(&case, &y, &Dispatch::base_case(&case), &Growth::from_case(&case), &CpfOptions::default()).unwrap();
    assert_eq!(curve.stop, StopReason::VoltageLimit { bus: 1 });
    // V = 0.9 at P = 0.9 sin(asin(P X / 0.9))/X; closed form for a unity-pf load.
    let v: f64 = 0.9;
    let p_at_floor = (v * v * (1.0 - v * v)).sqrt() / 0.25;
    assert!((curve.lambda_max - (p_at_floor - 1.0)).abs() < 1e-6, "{} vs {}", curve.lambda_max, p_at_floor - 1.0);
}

#[test]
fn unsolvable_start_is_an_error() {
    let case = two_bus(0.25, 2.5, 0.0);
    let y = build_admittance(&case);
    let err = cpf_loading_margin(&case, &y, &Dispatch::base_case(&case), &Growth::from_case(&case), &CpfOptions::default()).unwrap_err();
    assert!(matches!(err, PowerFlowError::InfeasibleStart(_)));
}

fn check_curve(case: &NetworkCase, curve: &PvCurve) {
    assert!(curve.lambda_max >= 0.0);
    for w in curve.samples.windows(2) {
        assert!(w[1].lambda >= w[0].lambda, "lambda decreased");
        assert!(w[1].v_monitored <= w[0].v_monitored + 1e-9, "monitored voltage rose: {} -> {}", w[0].v_monitored, w[1].v_monitored);
    }
    for s in &curve.samples {
        for (g, gen) in case.generators.iter().enumerate() {
            let env = q_envelope(s.pg[g], s.v[gen.bus], gen).unwrap();
            let q = s.qg[g];
            match s.modes[g] {
                GenMode::AtUpper => assert!((q - env.q_max).abs() < 1e-8, "gen {g}: {q} vs {}", env.q_max),
                GenMode::AtLower => assert!((q - env.q_min).abs() < 1e-8),
                GenMode::Regulating => assert!(q < env.q_max + 1e-9 && q > env.q_min - 1e-9, "gen {g} out of range"),
            }
        }
    }
    for e in &curve.limit_events {
        if e.kind == LimitKind::ActiveCap {
            continue;
        }
        let s = curve.samples.iter().find(|s| s.lambda == e.lambda).expect("event sample");
        let gen = &case.generators[e.generator];
        let env = q_envelope(s.pg[e.generator], s.v[gen.bus], gen).unwrap();
        let target = if e.kind == LimitKind::ReactiveUpper { env.q_max } else { env.q_min };
        assert!((s.qg[e.generator] - target).abs() < 1e-6);
    }
}

#[test]
fn ieee39_base_dispatch_has_positive_margin() {
    let case = bare39();
    let y = build_admittance(&case);
    let curve = cpf_loading_margin(&case, &y, &Dispatch::base_case(&case), &Growth::from_case(&case), &CpfOptions::default()).unwrap();
    assert!(curve.lambda_max > 0.0, "{:?}", curve.stop);
    check_curve(&case, &curve);
    let csv = curve.to_csv(&case);
    assert!(csv.starts_with("lambda,v_monitored,event\n"));
    assert_eq!(csv.lines().count(), curve.samples.len() + 2);
}

#[test]
fn ieee39_trace_to_the_nose_without_operating_limits() {
    let case = bare39();
    let y = build_admittance(&case);
    let opts = CpfOptions {
        check_voltage: false,
        check_branch_flow: false,
        ..Default::default()
    };
    let curve = cpf_loading_margin(&case, &y, &Dispatch::base_case(&case), &Growth::from_case(&case), &opts).unwrap();
    assert_eq!(curve.stop, StopReason::NosePoint);
    assert!(curve.lambda_max > 0.0);
    check_curve(&case, &curve);
}

#[test]
fn margin_does_not_depend_on_the_first_step() {
    let case = bare39();
    let y = build_admittance(&case);
    let margin = |initial_step: f64| {
        let opts = CpfOptions {
            initial_step,
            ..Default::default()
        };
        let curve = cpf_loading_margin(&case, &y, &Dispatch::base_case(&case), &Growth::from_case(&case), &opts).unwrap();
        assert_ne!(curve.stop, StopReason::StepFloor);
        curve.lambda_max
    };
    let reference = margin(0.05);
    for step in [1e-4, 0.3, 0.5] {
        let m = margin(step);
        assert!((m - reference).abs() < 1e-6, "initial step {step}: {m} vs {reference}");
    }
}

#[test]
fn hydrogen_demand_never_widens_the_margin() {
    let base_case = bare39();
    let y = build_admittance(&base_case);
    let opts = CpfOptions::default();
    let growth = Growth::from_case(&base_case);
    let lm0 = cpf_loading_margin(&base_case, &y, &Dispatch::base_case(&base_case), &growth, &opts)
        .unwrap()
        .lambda_max;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..20 {
        let bus = rng.random_range(0..39);
        let ph = rng.random_range(0.05..1.5);
        let case = base_case.with_electrolyzers(vec![ElectrolyzerRecord {
            bus,
            ph_min: 0.0,
            ph_max: 2.0,
            qh_min: 0.0,
            qh_max: 0.0,
            efficiency: 13.9,
        }]);
        let mut d = Dispatch::base_case(&case);
        d.ph = vec![ph];
        let lm1 = match cpf_loading_margin(&case, &y, &d, &growth, &opts) {
            Ok(c) => c.lambda_max,
            // The heavier dispatch may already sit beyond the operating region.
            Err(PowerFlowError::InfeasibleStart(_)) => 0.0,
            Err(e) => panic!("trial {trial}: {e}"),
        };
        assert!(lm1 <= lm0 + 1e-9, "trial {trial}: bus {bus}, ph {ph}: {lm1} > {lm0}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn newton_solutions_pass_the_independent_mismatch(scale in 0.5f64..1.2, x in 0.05f64..0.4) {
        let case = two_bus(x, 0.8 * scale, 0.3 * scale);
        let y = build_admittance(&case);
        let d = Dispatch::base_case(&case);
        if let Ok(res) = newton_solve(&case, &y, &d, &PowerFlowOptions::default()) {
            prop_assert!(max_mismatch(&case, &y, &res.point, &d.demand) < 1e-8);
        }
    }

    #[test]
    fn ieee39_scaled_load_solutions_pass_mismatch(scale in 0.6f64..1.0) {
        let case = bare39();
        let y = build_admittance(&case);
        let mut d = Dispatch::base_case(&case);
        for b in 0..39 {
            d.demand.p[b] *= scale;
            d.demand.q[b] *= scale;
        }
        for pg in &mut d.pg {
            *pg *= scale;
        }
        let res = newton_solve(&case, &y, &d, &PowerFlowOptions::default()).unwrap();
        prop_assert!(max_mismatch(&case, &y, &res.point, &d.demand) < 1e-8);
    }
}
