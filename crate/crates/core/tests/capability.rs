use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

use h2margin_core::capability::*;
use h2margin_core::network::GeneratorRecord;
use proptest::prelude::*;

const E: f64 = 2.574;
const XS: f64 = 1.912;

fn machine(ig_max: f64, xs: f64, delta_max: f64) -> GeneratorRecord {
    GeneratorRecord {
        bus: 0,
        pg_min: 0.0,
        pg_max: 1.0,
        ramp_up: 1.0,
        ramp_down: 1.0,
        internal_emf: E,
        synchronous_reactance: xs,
        stator_current_max: ig_max,
        delta_max,
        machine_base: 100.0,
        is_slack: false,
        big_m1: 2.0,
        big_m2: 2.0,
        pg_init: 0.0,
        v_setpoint: 1.0,
    }
}

#[test]
fn armature_circle() {
    assert_eq!(armature_q_limit(0.0, 1.0, 1.0).unwrap(), 1.0);
    assert!((armature_q_limit(0.6, 1.0, 1.0).unwrap() - 0.8).abs() < 1e-15);
    assert!(matches!(armature_q_limit(1.1, 1.0, 1.0), Err(CapabilityError::Infeasible { .. })));
    // Grazing the boundary from outside is absorbed.
    assert_eq!(armature_q_limit(1.0 + 1e-12, 1.0, 1.0).unwrap(), 0.0);
}

#[test]
fn field_circle() {
    assert!((field_q_limit(0.0, 1.0, E, XS).unwrap() - 0.823221).abs() < 1e-6);
    let edge = E / XS;
    assert_eq!(field_q_limit(edge, 1.0, E, XS).unwrap(), -1.0 / XS);
    assert!(field_q_limit(edge * 1.01, 1.0, E, XS).is_err());
    assert!(field_q_limit(0.3, 1.0, f64::INFINITY, XS).unwrap() >= 1e12);
    // A very large EMF gives a very large limit.
    assert!(field_q_limit(0.0, 1.0, 1e9, XS).unwrap() > 1e8);
}

#[test]
fn underexcitation_line() {
    assert!((underexcitation_q_min(0.7, 1.0, XS, FRAC_PI_2).unwrap() + 0.523013).abs() < 1e-6);
    assert!((underexcitation_q_min(0.0, 1.0, XS, FRAC_PI_2).unwrap() + 1.0 / XS).abs() < 1e-15);
    assert!((underexcitation_q_min(0.0, 1.0, XS, 0.3).unwrap() + 1.0 / XS).abs() < 1e-15);
    assert!(underexcitation_q_min(0.5, 1.0, 2.0, FRAC_PI_4).unwrap().abs() < 1e-15);
    assert!(underexcitation_q_min(0.5, 1.0, 2.0, 0.0).is_err());
    assert!(underexcitation_q_min(0.5, 1.0, 2.0, 2.0).is_err());
}

#[test]
fn envelope_examples() {
    let field = q_envelope(0.0, 1.0, &machine(1.0, XS, FRAC_PI_2)).unwrap();
    assert!((field.q_max - 0.823221).abs() < 1e-6);
    assert_eq!(field.binding, Binding::Field);

    let arm = q_envelope(0.0, 1.0, &machine(0.5, XS, FRAC_PI_2)).unwrap();
    assert_eq!(arm.q_max, 0.5);
    assert_eq!(arm.binding, Binding::Armature);
}

#[test]
fn envelope_at_the_circle_crossover() {
    // With ig = 1 the circles cross where sqrt(1 - p²) = sqrt(k² - p²) - 1/xs.
    let k = E / XS;
    let gen = machine(1.0, XS, FRAC_PI_2);
    let f = |p: f64| armature_q_limit(p, 1.0, 1.0).unwrap() - field_q_limit(p, 1.0, E, XS).unwrap();
    let (mut lo, mut hi) = (0.0, 1.0f64.min(k));
    assert!(f(lo) > 0.0 && f(hi) < 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let env = q_envelope(lo, 1.0, &gen).unwrap();
    assert!((env.q_armature - env.q_field).abs() < 1e-12);
    assert!((env.q_max - env.q_armature).abs() < 1e-12);
}

#[test]
fn exact_ties_report_armature() {
    // Field circle radius 2, offset 1: at pg = 0 both limits equal 1.
    let mut gen = machine(1.0, 1.0, FRAC_PI_2);
    gen.internal_emf = 2.0;
    let env = q_envelope(0.0, 1.0, &gen).unwrap();
    assert_eq!(env.q_armature, env.q_field);
    assert_eq!(env.binding, Binding::Armature);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn envelope_is_the_pointwise_minimum(frac in 0.0f64..1.0, v in 0.9f64..1.1, ig in 0.5f64..1.5) {
        let gen = machine(ig, XS, FRAC_PI_2);
        let pg = frac * (v * ig).min(v * E / XS);
        let env = q_envelope(pg, v, &gen).unwrap();
        let a = armature_q_limit(pg, v, ig).unwrap();
        let f = field_q_limit(pg, v, E, XS).unwrap();
        prop_assert_eq!(env.q_max.to_bits(), a.min(f).to_bits());
        prop_assert_eq!(env.q_armature.to_bits(), a.to_bits());
        prop_assert_eq!(env.q_field.to_bits(), f.to_bits());
    }

    #[test]
    fn limits_fall_as_active_power_rises(frac in 0.01f64..0.95, v in 0.9f64..1.1, ig in 0.5f64..1.5) {
        let pg = frac * (v * ig).min(v * E / XS);
        let h = 1e-6;
        prop_assert!(armature_q_limit(pg + h, v, ig).unwrap() < armature_q_limit(pg, v, ig).unwrap());
        prop_assert!(field_q_limit(pg + h, v, E, XS).unwrap() < field_q_limit(pg, v, E, XS).unwrap());
    }

    #[test]
    fn lower_limit_stays_below_upper(frac in 0.0f64..0.9, v in 0.9f64..1.1, ig in 0.5f64..1.5) {
        let gen = machine(ig, XS, FRAC_PI_2);
        let pg = frac * (v * ig).min(v * E / XS);
        let env = q_envelope(pg, v, &gen).unwrap();
        prop_assert!(env.q_min <= env.q_max);
    }
}
