use std::collections::HashMap;

use h2margin_core::network::*;
use h2margin_core::opf::*;
use h2margin_core::powerflow::{newton_solve, Dispatch, PointClass, PowerFlowOptions};
use h2margin_nlp::{NlpProblem, SolverOptions};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_profile() -> Vec<HourlyProfile> {
    vec![HourlyProfile {
        hour: 1,
        total_demand_p: 50.0,
        total_demand_q: 0.0,
        wind_available: 0.0,
    }]
}

/// Two buses, a 0.5 pu load and one electrolyzer behind a j0.25 line.
fn toy_case() -> NetworkCase {
    let case = two_bus(0.25, 0.5, 0.0);
    case.with_electrolyzers(vec![ElectrolyzerRecord {
        bus: 1,
        ph_min: 0.0,
        ph_max: 5.0,
        qh_min: 0.0,
        qh_max: 0.0,
        efficiency: 13.9,
    }])
}

fn toy_scenario(lm: f64) -> ScenarioConfig {
    let mut sc = ScenarioConfig::new(toy_profile(), 0.0, lm, Mode::Dispatch);
    sc.enforce_reserve = false;
    sc
}

fn ieee39_scenario(horizon: usize, alpha: f64, lm: f64, mode: Mode) -> ScenarioConfig {
    let mut sc = ScenarioConfig::new(profile24(), alpha, lm, mode);
    sc.horizon = horizon;
    sc
}

#[test]
fn census_matches_closed_forms() {
    let case = ieee39();
    let inst = ModelInstance::assemble(&case, &ieee39_scenario(24, 0.3, 0.1, Mode::Allocate)).unwrap();
    let census = inst.census();
    let (nb, ng, t) = (39, 10, 24);
    let rated = case.branches.iter().filter(|b| b.in_service && b.s_max.is_finite()).count();
    assert_eq!(census[&ConstraintKind::ActiveBalance] + census[&ConstraintKind::ReactiveBalance], 2 * nb * t * 2);
    assert_eq!(census[&ConstraintKind::RampUp], ng * (t - 1) * 2);
    assert_eq!(census[&ConstraintKind::Reserve], ng * t);
    assert_eq!(census[&ConstraintKind::WindCap], t);
    assert_eq!(census[&ConstraintKind::BranchFlowFrom], rated * t * 2);
    assert_eq!(census[&ConstraintKind::ArmatureCircle], ng * t * 2);
    assert_eq!(census[&ConstraintKind::CopQUpperField], ng * t);
    assert_eq!(census[&ConstraintKind::PgScaleSelect], (ng - 1) * t);
    assert_eq!(census[&ConstraintKind::BinaryY], ng * t);
    assert_eq!(census[&ConstraintKind::BinaryZ], (ng - 1) * t);
    assert_eq!(census[&ConstraintKind::HydrogenCoupling], 29 * t);
    assert_eq!(census[&ConstraintKind::LoadingPin], 1);
    let rows: usize = census.iter().filter(|(k, _)| !k.is_penalty()).map(|(_, v)| v).sum();
    assert_eq!(rows, inst.num_rows());
    let dump = inst.catalog_dump();
    assert_eq!(dump.lines().count(), 1 + inst.catalog.len() + inst.penalty_catalog.len());
}

#[test]
fn single_hour_has_no_ramps() {
    let inst = ModelInstance::assemble(&ieee39(), &ieee39_scenario(1, 0.3, 0.1, Mode::Allocate)).unwrap();
    let census = inst.census();
    assert!(!census.contains_key(&ConstraintKind::RampUp));
    assert!(!census.contains_key(&ConstraintKind::RampDown));
}

#[test]
fn zero_alpha_forbids_wind() {
    let inst = ModelInstance::assemble(&ieee39(), &ieee39_scenario(1, 0.0, 0.1, Mode::Allocate)).unwrap();
    let mut x = inst.initial_point();
    let lay = &inst.layout;
    let row = inst.catalog.iter().position(|e| e.kind == ConstraintKind::WindCap).unwrap();
    for w in 0..lay.nw {
        x[lay.pw(0, PointClass::Cop, w)] = 0.0;
    }
    let (c, _) = inst.constraint_eval(&x);
    assert!(c[row] <= 0.0);
    x[lay.pw(0, PointClass::Cop, 2)] = 0.01;
    let (c, _) = inst.constraint_eval(&x);
    assert!(c[row] > 0.0);
}

#[test]
fn dispatch_mode_needs_units() {
    let case = ieee39().with_electrolyzers(Vec::new());
    let err = ModelInstance::assemble(&case, &ieee39_scenario(1, 0.3, 0.1, Mode::Dispatch)).unwrap_err();
    assert!(err.to_string().contains("no P2H units"));
}

#[test]
fn one_pu_all_day_is_33360_kg() {
    let case = ieee39().with_electrolyzers(vec![ElectrolyzerRecord {
        bus: 3,
        ph_min: 0.0,
        ph_max: 2.0,
        qh_min: 0.0,
        qh_max: 0.0,
        efficiency: 13.90,
    }]);
    let inst = ModelInstance::assemble(&case, &ieee39_scenario(24, 0.3, 0.1, Mode::Dispatch)).unwrap();
    let mut x = inst.initial_point();
    for t in 0..24 {
        x[inst.layout.ph(t, PointClass::Cop, 0)] = 1.0;
    }
    let (th, grad) = inst.objective_eval(&x);
    assert!((th - 33_360.0).abs() < 1e-6, "{th}");
    assert!((grad[inst.layout.ph(5, PointClass::Cop, 0)] - 1390.0).abs() < 1e-9);
}

#[test]
fn newton_point_satisfies_cop_balances() {
    let case = ieee39();
    let sc = ieee39_scenario(1, 0.3, 0.1, Mode::Dispatch);
    let inst = ModelInstance::assemble(&case, &sc).unwrap();
    let demand = nodal_demand(&case, &profile24()[0]).unwrap();
    let mut d = Dispatch::base_case(&case);
    let scale = demand.p.iter().sum::<f64>() / case.base_total_demand().0;
    d.pg.iter_mut().for_each(|p| *p *= scale);
    d.demand = demand;
    d.pw = vec![0.1; case.wind_farms.len()];
    d.ph = vec![0.2; case.electrolyzers.len()];
    let pf = newton_solve(&case, &inst.admittance, &d, &PowerFlowOptions::default()).unwrap();
    let mut x = inst.initial_point();
    inst.embed_point(&mut x, 0, PointClass::Cop, &pf.point);
    let (c, _) = inst.constraint_eval(&x);
    for (i, e) in inst.catalog.iter().enumerate() {
        let balance = matches!(e.kind, ConstraintKind::ActiveBalance | ConstraintKind::ReactiveBalance);
        if balance && e.point == Some(PointClass::Cop) {
            assert!(c[i].abs() < 1e-8, "{:?} residual {}", e, c[i]);
        }
    }
}

#[test]
fn binary_residual_is_y_minus_y_squared() {
    let inst = ModelInstance::assemble(&toy_case(), &toy_scenario(0.1)).unwrap();
    let mut x = inst.initial_point();
    x[inst.layout.y(0, 0)] = 0.5;
    assert_eq!(inst.binary_residuals(&x), vec![0.25]);
    x[inst.layout.y(0, 0)] = 1.0;
    assert_eq!(inst.binary_residuals(&x), vec![0.0]);
}

#[test]
fn zero_margin_copy_satisfies_the_slp_block() {
    let case = ieee39();
    let inst = ModelInstance::assemble(&case, &ieee39_scenario(1, 0.3, 0.0, Mode::Dispatch)).unwrap();
    let mut x = inst.initial_point();
    let cop = inst.point(&x, 0, PointClass::Cop);
    let mut slp = cop.clone();
    slp.point_class = PointClass::Slp;
    inst.embed_point(&mut x, 0, PointClass::Slp, &slp);
    for g in 0..inst.layout.ng {
        x[inst.layout.v_up(0, g)] = 0.0;
        x[inst.layout.v_dn(0, g)] = 0.0;
    }
    let (c, _) = inst.constraint_eval(&x);
    for (i, e) in inst.catalog.iter().enumerate() {
        let check = match e.kind {
            ConstraintKind::ActiveBalance | ConstraintKind::ReactiveBalance => e.point == Some(PointClass::Slp),
            ConstraintKind::VoltageCoupling | ConstraintKind::HydrogenCoupling | ConstraintKind::WindCoupling => true,
            ConstraintKind::PgScaleUpper => true,
            _ => false,
        };
        if check {
            let cop_row = inst
                .catalog
                .iter()
                .position(|o| o.kind == e.kind && o.element == e.element && o.point == Some(PointClass::Cop));
            let reference = cop_row.map(|r| c[r]).unwrap_or(0.0);
            assert!((c[i] - reference).abs() < 1e-12, "{e:?}: {} vs {}", c[i], reference);
        }
    }
}

fn random_point(inst: &ModelInstance, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (xl, xu) = inst.bounds();
    let lay = &inst.layout;
    let mut x: Vec<f64> = (0..lay.n).map(|_| rng.random_range(-1.0..1.0)).collect();
    for t in 0..lay.horizon {
        for c in PointClass::BOTH {
            for b in 0..lay.nb {
                x[lay.v(t, c, b)] = rng.random_range(0.9..1.1);
                x[lay.theta(t, c, b)] = rng.random_range(-0.6..0.6);
            }
        }
    }
    x[lay.lambda()] = rng.random_range(0.0..0.4);
    for j in 0..lay.n {
        if xl[j] == xu[j] {
            x[j] = xl[j];
        }
    }
    x
}

fn jacobian_map(inst: &ModelInstance, x: &[f64]) -> HashMap<(usize, usize), f64> {
    let mut m = HashMap::new();
    let (_, trip) = inst.constraint_eval(x);
    for (i, j, v) in trip {
        *m.entry((i, j)).or_insert(0.0) += v;
    }
    m
}

fn check_jacobian(inst: &ModelInstance, x: &[f64]) {
    let analytic = jacobian_map(inst, x);
    let m = inst.num_rows();
    let mut plus = vec![0.0; m];
    let mut minus = vec![0.0; m];
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        let h = 1e-6 * x[j].abs().max(1.0);
        xp[j] = x[j] + h;
        inst.constraints(&xp, &mut plus);
        xp[j] = x[j] - h;
        inst.constraints(&xp, &mut minus);
        xp[j] = x[j];
        for i in 0..m {
            let fd = (plus[i] - minus[i]) / (2.0 * h);
            let a = analytic.get(&(i, j)).copied().unwrap_or(0.0);
            let err = (a - fd).abs() / a.abs().max(1.0);
            assert!(err < 1e-6, "row {i} ({:?}) col {j}: analytic {a}, fd {fd}", inst.catalog[i]);
        }
    }
}

fn check_hessian(inst: &ModelInstance, x: &[f64], rng: &mut ChaCha8Rng) {
    let m = inst.num_rows();
    let n = x.len();
    let w: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let structure = inst.hessian_structure();
    let mut vals = vec![0.0; structure.len()];
    inst.hessian_values(x, 1.0, &w, &mut vals);
    let mut hess: HashMap<(usize, usize), f64> = HashMap::new();
    for (&(r, c), v) in structure.iter().zip(&vals) {
        assert!(r >= c);
        *hess.entry((r, c)).or_insert(0.0) += v;
    }
    let jt_w = |x: &[f64]| {
        let mut g = vec![0.0; n];
        for ((i, j), v) in jacobian_map(inst, x) {
            g[j] += w[i] * v;
        }
        g
    };
    let mut xp = x.to_vec();
    for j in 0..n {
        let h = 1e-6 * x[j].abs().max(1.0);
        xp[j] = x[j] + h;
        let gp = jt_w(&xp);
        xp[j] = x[j] - h;
        let gm = jt_w(&xp);
        xp[j] = x[j];
        for r in 0..n {
            let fd = (gp[r] - gm[r]) / (2.0 * h);
            let key = (r.max(j), r.min(j));
            let a = hess.get(&key).copied().unwrap_or(0.0);
            let err = (a - fd).abs() / a.abs().max(1.0);
            assert!(err < 1e-5, "hessian ({r},{j}): analytic {a}, fd {fd}");
        }
    }
}

#[test]
fn jacobian_matches_central_differences_on_two_bus() {
    let mut sc = toy_scenario(0.2);
    sc.unity_power_factor = false;
    let inst = ModelInstance::assemble(&toy_case(), &sc).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let x = random_point(&inst, &mut rng);
        check_jacobian(&inst, &x);
    }
    let x = random_point(&inst, &mut rng);
    check_hessian(&inst, &x, &mut rng);
}

#[test]
fn jacobian_matches_central_differences_on_ieee39() {
    let inst = ModelInstance::assemble(&ieee39(), &ieee39_scenario(2, 0.3, 0.1, Mode::Allocate)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(39);
    for _ in 0..10 {
        let x = random_point(&inst, &mut rng);
        check_jacobian(&inst, &x);
    }
}

#[test]
fn hessian_matches_differenced_jacobian_on_ieee39() {
    let inst = ModelInstance::assemble(&ieee39(), &ieee39_scenario(2, 0.3, 0.1, Mode::Allocate)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_point(&inst, &mut rng);
    check_hessian(&inst, &x, &mut rng);
}

/// Largest electrolyzer demand (pu, on a 1e-3 grid) whose SLP still holds
/// bus 2 at or above 0.9 pu, found by repeated Newton solves.
fn grid_search_ph(lambda: f64) -> f64 {
    let case = two_bus(0.25, 0.5, 0.0);
    let y = build_admittance(&case);
    let feasible = |ph: f64| {
        let mut d = Dispatch::base_case(&case);
        d.demand = NodalDemand {
            p: vec![0.0, 0.5 * (1.0 + lambda) + ph],
            q: vec![0.0, 0.0],
        };
        d.pg = vec![0.5 * (1.0 + lambda) + ph];
        match newton_solve(&case, &y, &d, &PowerFlowOptions::default()) {
            Ok(r) => r.point.v[1] >= 0.9,
            Err(_) => false,
        }
    };
    let mut ph = 0.0;
    while feasible(ph + 1e-3) {
        ph += 1e-3;
    }
    ph
}

#[test]
fn two_bus_hydrogen_matches_grid_search() {
    let opts = SolverOptions::default();
    for (lambda, closed_form) in [(0.0, 1.0692), (0.1, 1.0192), (0.2, 0.9692)] {
        let oracle = grid_search_ph(lambda);
        assert!((oracle - closed_form).abs() < 2e-3, "oracle {oracle} vs {closed_form}");
        let inst = ModelInstance::assemble(&toy_case(), &toy_scenario(lambda)).unwrap();
        let report = solve_instance(&inst, &opts, None).unwrap();
        assert!(report.status.is_success(), "{:?}", report.status);
        let sol = extract_solution(&inst, &report, true);
        let ph = sol.dispatch[0][0].ph[0];
        assert!((ph - oracle).abs() <= 1e-3 + 1e-6, "lambda {lambda}: opf {ph}, grid {oracle}");
        assert!((sol.lambda_achieved - lambda).abs() < 1e-8);
        assert!(sol.violation < 1e-6);
        assert!((sol.total_hydrogen - 13.9 * ph * 100.0).abs() < 1e-6);
        let oracle_lm = sol.checks[0].oracle_lm.unwrap();
        assert!(oracle_lm >= lambda - 1e-4, "cpf margin {oracle_lm} below {lambda}");
    }
}
