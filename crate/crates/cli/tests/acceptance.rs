//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line with the measured numbers before asserting.

use std::collections::HashMap;
use std::sync::OnceLock;
use std::time::Instant;

use h2margin_cli::{run_sweep, SweepResult, SweepSpec, LM_TOLERANCE};
use h2margin_core::capability::{armature_q_limit, field_q_limit, q_envelope};
use h2margin_core::network::*;
use h2margin_core::opf::*;
use h2margin_core::powerflow::*;
use h2margin_nlp::{NlpProblem, SolverOptions};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LM_GRID: [f64; 5] = [0.10, 0.15, 0.20, 0.25, 0.30];

fn verdict(n: usize, ok: bool, detail: &str) {
    println!("criterion {n}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
}

/// α = 0.5 over the lm grid.
fn lm_sweep() -> &'static SweepResult {
    static CELL: OnceLock<SweepResult> = OnceLock::new();
    CELL.get_or_init(|| {
        let spec = SweepSpec {
            alpha_values: vec![0.5],
            lm_values: LM_GRID.to_vec(),
            mode: Mode::Allocate,
            seed: 0,
            starts: 1,
            workers: 1,
        };
        run_sweep(&spec, &ieee39(), &profile24()).expect("lm sweep")
    })
}

/// α ∈ {0.3, 0.7} at lm = 0.15.
fn alpha_sweep() -> &'static SweepResult {
    static CELL: OnceLock<SweepResult> = OnceLock::new();
    CELL.get_or_init(|| {
        let spec = SweepSpec {
            alpha_values: vec![0.3, 0.7],
            lm_values: vec![0.15],
            mode: Mode::Allocate,
            seed: 0,
            starts: 1,
            workers: 0,
        };
        run_sweep(&spec, &ieee39(), &profile24()).expect("alpha sweep")
    })
}

fn th(result: &SweepResult, alpha: f64, lm: f64) -> Option<f64> {
    let cell = result.cell(alpha, lm)?;
    let sol = cell.solution.as_ref()?;
    sol.converged.then_some(sol.total_hydrogen)
}

#[test]
fn criterion_01_newton_on_the_base_case() {
    let mut case = ieee39();
    case.wind_farms.clear();
    case.electrolyzers.clear();
    let y = build_admittance(&case);
    let start = Instant::now();
    let res = newton_solve(&case, &y, &Dispatch::base_case(&case), &PowerFlowOptions::default());
    let secs = start.elapsed().as_secs_f64();
    let (iters, mis) = res.as_ref().map(|r| (r.iterations, r.max_mismatch)).unwrap_or((usize::MAX, f64::INFINITY));
    let ok = iters <= 15 && mis < 1e-8 && secs < 1.0;
    verdict(1, ok, &format!("{iters} iterations, mismatch {mis:.2e} pu, {secs:.3} s"));
    assert!(ok);
}

#[test]
fn criterion_02_two_bus_nose() {
    let mut case = two_bus(0.25, 1.0, 0.0);
    case.buses[1].v_min = 0.05;
    case.buses[1].v_max = 1.5;
    let y = build_admittance(&case);
    let start = Instant::now();
    let curve = cpf_loading_margin(&case, &y, &Dispatch::base_case(&case), &Growth::from_case(&case), &CpfOptions::default())
        .expect("cpf");
    let secs = start.elapsed().as_secs_f64();
    let err = (curve.lambda_max - 1.0).abs();
    let ok = err <= 0.01 && curve.stop == StopReason::NosePoint && secs < 1.0;
    verdict(2, ok, &format!("lambda_max {:.6}, expected 1.0, {secs:.3} s", curve.lambda_max));
    assert!(ok);
}

#[test]
fn criterion_03_capability_envelope() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let case = ieee39();
    let mut exact = 0;
    for _ in 0..1000 {
        let mut gen = case.generators[rng.random_range(0..case.generators.len())].clone();
        gen.internal_emf = rng.random_range(1.5..3.5);
        let v = rng.random_range(0.9..1.1);
        let reach = (v * gen.stator_current_max).min(v * gen.internal_emf / gen.synchronous_reactance);
        let pg = rng.random_range(0.0..1.0) * reach;
        let env = q_envelope(pg, v, &gen).expect("inside both circles");
        let a = armature_q_limit(pg, v, gen.stator_current_max).unwrap();
        let f = field_q_limit(pg, v, gen.internal_emf, gen.synchronous_reactance).unwrap();
        if env.q_max.to_bits() == a.min(f).to_bits() {
            exact += 1;
        }
    }
    let at_zero = field_q_limit(0.0, 1.0, 2.574, 1.912).unwrap();
    let ok = exact == 1000 && (at_zero - 0.823221).abs() < 1e-6;
    verdict(3, ok, &format!("{exact}/1000 exact, field limit at PG=0 {at_zero:.6}"));
    assert!(ok);
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

/// Worst relative error between the analytic Jacobian and central differences.
fn jacobian_error(inst: &ModelInstance, x: &[f64]) -> f64 {
    let mut analytic: HashMap<(usize, usize), f64> = HashMap::new();
    for (i, j, v) in inst.constraint_eval(x).1 {
        *analytic.entry((i, j)).or_insert(0.0) += v;
    }
    let m = inst.num_rows();
    let (mut plus, mut minus) = (vec![0.0; m], vec![0.0; m]);
    let mut xp = x.to_vec();
    let mut worst = 0.0f64;
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
            worst = worst.max((a - fd).abs() / a.abs().max(1.0));
        }
    }
    worst
}

#[test]
fn criterion_04_derivatives() {
    let toy = ModelInstance::assemble(&hydrogen_toy(), &toy_scenario(0.2)).unwrap();
    let mut sc = ScenarioConfig::new(profile24(), 0.5, 0.1, Mode::Allocate);
    sc.horizon = 2;
    let big = ModelInstance::assemble(&ieee39(), &sc).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = [0.0f64; 2];
    for (k, inst) in [&toy, &big].into_iter().enumerate() {
        for _ in 0..10 {
            let x = random_point(inst, &mut rng);
            worst[k] = worst[k].max(jacobian_error(inst, &x));
        }
    }
    let ok = worst.iter().all(|&e| e < 1e-6);
    verdict(4, ok, &format!("max relative error 2-bus {:.2e}, 39-bus {:.2e}", worst[0], worst[1]));
    assert!(ok);
}

fn hydrogen_toy() -> NetworkCase {
    two_bus(0.25, 0.5, 0.0).with_electrolyzers(vec![ElectrolyzerRecord {
        bus: 1,
        ph_min: 0.0,
        ph_max: 5.0,
        qh_min: 0.0,
        qh_max: 0.0,
        efficiency: 13.9,
    }])
}

fn toy_scenario(lm: f64) -> ScenarioConfig {
    let profile = HourlyProfile {
        hour: 1,
        total_demand_p: 50.0,
        total_demand_q: 0.0,
        wind_available: 0.0,
    };
    let mut sc = ScenarioConfig::new(vec![profile], 0.0, lm, Mode::Dispatch);
    sc.enforce_reserve = false;
    sc
}

/// Largest PH on a 1e-3 pu grid whose SLP Newton solution keeps bus 2 at or
/// above its 0.9 pu floor.
fn grid_search(lambda: f64) -> f64 {
    let case = two_bus(0.25, 0.5, 0.0);
    let y = build_admittance(&case);
    let feasible = |ph: f64| {
        let load = 0.5 * (1.0 + lambda) + ph;
        let mut d = Dispatch::base_case(&case);
        d.demand = NodalDemand {
            p: vec![0.0, load],
            q: vec![0.0, 0.0],
        };
        d.pg = vec![load];
        newton_solve(&case, &y, &d, &PowerFlowOptions::default()).is_ok_and(|r| r.point.v[1] >= 0.9)
    };
    let mut ph = 0.0;
    while feasible(ph + 1e-3) {
        ph += 1e-3;
    }
    ph
}

#[test]
fn criterion_05_toy_against_grid_search() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut all_ok = true;
    let mut parts = Vec::new();
    for lambda in [0.0, 0.1, 0.2] {
        let oracle = grid_search(lambda);
        let inst = ModelInstance::assemble(&hydrogen_toy(), &toy_scenario(lambda)).unwrap();
        let ph = match solve_instance(&inst, &SolverOptions::default(), None) {
            Ok(r) if r.status.is_success() => r.x[inst.layout.ph(0, PointClass::Cop, 0)],
            _ => {
                all_ok = false;
                f64::NAN
            }
        };
        worst = worst.max((ph - oracle).abs());
        parts.push(format!("lambda {lambda}: opf {ph:.4} grid {oracle:.3}"));
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = all_ok && worst <= 2e-3 && secs < 30.0;
    verdict(5, ok, &format!("{}; {secs:.2} s", parts.join(", ")));
    assert!(ok);
}

#[test]
fn criterion_06_hydrogen_falls_with_margin() {
    let sweep = lm_sweep();
    let ths: Vec<Option<f64>> = LM_GRID.iter().map(|&lm| th(sweep, 0.5, lm)).collect();
    let shown: Vec<String> = LM_GRID
        .iter()
        .zip(&ths)
        .map(|(lm, t)| format!("{lm:.2}:{}", t.map(|v| format!("{v:.0}")).unwrap_or_else(|| "failed".into())))
        .collect();
    let solved = ths.iter().all(Option::is_some);
    let vals: Vec<f64> = ths.iter().map(|t| t.unwrap_or(f64::NAN)).collect();
    // Non-increasing up to the solver's relative optimality tolerance.
    let monotone = solved && vals.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-6));
    let flat_start = solved && vals[0] - vals[1] <= 0.005 * vals[0];
    let ok = monotone && flat_start;
    verdict(
        6,
        ok,
        &format!("TH kg by lm [{}]; monotone {monotone}; drop 0.10 to 0.15 within 0.5% {flat_start}", shown.join(", ")),
    );
    assert!(ok);
}

#[test]
fn criterion_07_hydrogen_saturates_with_wind() {
    let (a, b) = (alpha_sweep(), lm_sweep());
    let t3 = th(a, 0.3, 0.15);
    let t5 = th(b, 0.5, 0.15);
    let t7 = th(a, 0.7, 0.15);
    let ok = match (t3, t5, t7) {
        (Some(t3), Some(t5), Some(t7)) => t3 <= t5 * (1.0 + 1e-6) && (t7 - t5).abs() <= 0.02 * t5,
        _ => false,
    };
    verdict(7, ok, &format!("TH at lm 0.15: alpha 0.3 {t3:?}, 0.5 {t5:?}, 0.7 {t7:?}"));
    assert!(ok);
}

#[test]
fn criterion_08_allocation_shape() {
    // Soft target: reported, never asserted.
    let sweep = lm_sweep();
    let targets = [(2i64, 805.0), (10, 626.0), (22, 716.0)];
    let mut lines = Vec::new();
    let mut ok = false;
    for cell in &sweep.cells {
        let Some(sol) = &cell.solution else { continue };
        let size = |bus: i64| sol.p2h_sizing.iter().find(|a| a.bus == bus).map(|a| a.size_mw).unwrap_or(0.0);
        let hit = targets.iter().all(|&(bus, mw)| (size(bus) - mw).abs() <= 0.1 * mw);
        ok |= hit;
        let alloc: Vec<String> = sol.p2h_sizing.iter().map(|a| format!("{}:{:.0}", a.bus, a.size_mw)).collect();
        lines.push(format!("lm {:.2} -> {}", cell.lm, alloc.join(" ")));
    }
    verdict(8, ok, &format!("soft target; buses:MW per cell at alpha 0.5: {}", lines.join(" | ")));
}

#[test]
fn criterion_09_closed_loop_certification() {
    let mut checked = 0;
    let mut failures = Vec::new();
    for cell in lm_sweep().cells.iter().chain(&alpha_sweep().cells) {
        let Some(sol) = &cell.solution else { continue };
        if !sol.converged {
            continue;
        }
        checked += 1;
        match &cell.verification {
            Some(v) if v.pass => {}
            Some(v) => {
                for h in v.hours.iter().filter(|h| !h.pass) {
                    failures.push(format!(
                        "alpha {} lm {} hour {}: {}",
                        cell.alpha,
                        cell.lm,
                        h.check.hour,
                        h.reason.clone().unwrap_or_default()
                    ));
                }
            }
            None => failures.push(format!("alpha {} lm {}: not verified", cell.alpha, cell.lm)),
        }
    }
    let worst_gap = lm_sweep()
        .cells
        .iter()
        .chain(&alpha_sweep().cells)
        .filter_map(|c| c.verification.as_ref().map(|v| (c.lm, v)))
        .flat_map(|(lm, v)| v.hours.iter().filter_map(move |h| h.check.oracle_lm.map(|l| l - lm)))
        .fold(f64::INFINITY, f64::min);
    let ok = checked > 0 && failures.is_empty();
    verdict(
        9,
        ok,
        &format!(
            "{checked} cells certified, smallest oracle margin surplus {worst_gap:.4} (tolerance {LM_TOLERANCE}); {}",
            if failures.is_empty() { "no failures".to_string() } else { failures.join("; ") }
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_10_constraint_hygiene() {
    let mut worst_comp = 0.0f64;
    let mut worst_gap = 0.0f64;
    let mut worst_reserve = f64::NEG_INFINITY;
    let mut worst_wind = f64::NEG_INFINITY;
    let mut cells = 0;
    for sweep in [lm_sweep(), alpha_sweep()] {
        for cell in &sweep.cells {
            let Some(sol) = &cell.solution else { continue };
            if !sol.converged {
                continue;
            }
            cells += 1;
            let inst = ModelInstance::assemble(&ieee39(), &ScenarioConfig::new(profile24(), cell.alpha, cell.lm, Mode::Allocate))
                .unwrap();
            worst_comp = worst_comp.max(inst.complementarity_residual(&sol.x));
            worst_gap = worst_gap.max(inst.binary_residuals(&sol.x).iter().fold(0.0f64, |m, r| m.max(r.abs())));
            let (c, _) = inst.constraint_eval(&sol.x);
            for (i, e) in inst.catalog.iter().enumerate() {
                match e.kind {
                    ConstraintKind::Reserve => worst_reserve = worst_reserve.max(c[i]),
                    ConstraintKind::WindCap => worst_wind = worst_wind.max(c[i]),
                    _ => {}
                }
            }
        }
    }
    let ok = cells > 0 && worst_comp <= 1e-6 && worst_gap <= 1e-6 && worst_reserve <= 1e-6 && worst_wind <= 1e-6;
    verdict(
        10,
        ok,
        &format!(
            "{cells} cells; complementarity {worst_comp:.2e}, integrality gap {worst_gap:.2e}, reserve row max {worst_reserve:.2e}, wind cap row max {worst_wind:.2e}"
        ),
    );
    assert!(ok);
}
