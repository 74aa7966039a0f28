use std::process::Command;
use std::sync::OnceLock;

use h2margin_cli::*;
use h2margin_core::network::{ieee39, profile24, save_case, two_bus, HourlyProfile};
use h2margin_core::opf::{HarvestSolution, Mode};

fn one_hour() -> Vec<HourlyProfile> {
    profile24()[..1].to_vec()
}

fn spec(lm: f64) -> RunSpec {
    RunSpec {
        alpha: 0.5,
        lm,
        mode: Mode::Allocate,
        seed: 0,
        starts: 1,
    }
}

fn solved() -> &'static HarvestSolution {
    static SOL: OnceLock<HarvestSolution> = OnceLock::new();
    SOL.get_or_init(|| run_scenario(&ieee39(), &one_hour(), &spec(0.1), None).expect("scenario"))
}

fn singleton_sweep() -> SweepResult {
    let s = SweepSpec {
        alpha_values: vec![0.5],
        lm_values: vec![0.1],
        mode: Mode::Allocate,
        seed: 0,
        starts: 1,
        workers: 1,
    };
    run_sweep(&s, &ieee39(), &one_hour()).expect("sweep")
}

#[test]
fn fresh_solution_verifies() {
    let sol = solved();
    assert!(sol.converged, "status {}", sol.status);
    let report = verify_solution(sol, &ieee39(), &one_hour()).unwrap();
    assert!(report.pass, "{}", report.to_text());
    for h in &report.hours {
        assert!(h.check.newton_mismatch.unwrap() < MISMATCH_TOLERANCE);
        assert!(h.check.oracle_lm.unwrap() >= 0.1 - LM_TOLERANCE);
    }
}

#[test]
fn inflated_hydrogen_demand_is_flagged() {
    let mut sol = solved().clone();
    let cop = &mut sol.dispatch[0][0];
    let (e, _) = cop
        .ph
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("at least one candidate");
    assert!(cop.ph[e] > 0.0, "no hydrogen to corrupt");
    cop.ph[e] *= 1.5;
    let report = verify_solution(&sol, &ieee39(), &one_hour()).unwrap();
    assert!(!report.pass);
    assert!(report.hours[0].reason.is_some());
}

#[test]
fn stale_solution_is_rejected() {
    let sol = solved();
    let err = verify_solution(sol, &two_bus(0.25, 0.5, 0.2), &one_hour()).unwrap_err();
    assert!(err.to_string().contains("stale"), "{err}");
}

#[test]
fn zero_margin_reduces_to_a_power_flow_check() {
    let sol = run_scenario(&ieee39(), &one_hour(), &spec(0.0), None).unwrap();
    assert!(sol.converged);
    let report = verify_solution(&sol, &ieee39(), &one_hour()).unwrap();
    assert!(report.pass, "{}", report.to_text());
    assert!(sol.total_hydrogen >= solved().total_hydrogen - 1e-6);
}

#[test]
fn singleton_sweep_matches_a_single_run() {
    let sweep = singleton_sweep();
    let cell = sweep.cell(0.5, 0.1).unwrap();
    let sol = cell.solution.as_ref().unwrap();
    assert_eq!(sol.status, solved().status);
    assert!((sol.total_hydrogen - solved().total_hydrogen).abs() <= 1e-9 * sol.total_hydrogen.max(1.0));
    assert!(cell.verification.as_ref().unwrap().pass);
}

#[test]
fn sweep_tables_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_sweep_tables(a.path(), &singleton_sweep()).unwrap();
    write_sweep_tables(b.path(), &singleton_sweep()).unwrap();
    for name in ["th_vs_lm.csv", "allocation.csv", "hourly_p2h.csv"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between runs");
        let text = String::from_utf8(x).unwrap();
        assert!(text.starts_with(&format!("# h2margin {VERSION}\n# config ")));
    }
}

#[test]
fn sweep_spec_rejects_bad_grids() {
    let mut s = SweepSpec {
        alpha_values: vec![],
        lm_values: vec![0.1],
        mode: Mode::Allocate,
        seed: 0,
        starts: 1,
        workers: 1,
    };
    assert!(s.validate().is_err());
    s.alpha_values = vec![1.5];
    assert!(s.validate().is_err());
    s.alpha_values = vec![0.5];
    assert!(s.validate().is_ok());
}

#[test]
fn dispatch_mode_without_units_is_an_error() {
    let mut case = ieee39();
    case.electrolyzers.clear();
    let err = run_scenario(&case, &one_hour(), &RunSpec { mode: Mode::Dispatch, ..spec(0.1) }, None).unwrap_err();
    assert!(err.to_string().contains("no P2H units"), "{err}");
}

#[test]
fn binary_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let case_path = dir.path().join("case.toml");
    save_case(&ieee39(), &case_path).unwrap();
    let profile_path = dir.path().join("profile.csv");
    let all = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/profile24.csv")).unwrap();
    let first_hour: Vec<&str> = all.lines().take(2).collect();
    std::fs::write(&profile_path, first_hour.join("\n") + "\n").unwrap();
    let out = dir.path().join("out");
    let exe = env!("CARGO_BIN_EXE_h2margin");

    let info = Command::new(exe).args(["case-info", "--case"]).arg(&case_path).output().unwrap();
    assert!(info.status.success());
    assert!(String::from_utf8_lossy(&info.stdout).contains("buses 39"));

    let run = Command::new(exe)
        .args(["run", "--alpha", "0.5", "--lm", "0.1", "--case"])
        .arg(&case_path)
        .arg("--profiles")
        .arg(&profile_path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    for name in ["hourly_dispatch.csv", "hydrogen_schedule.csv", "allocation_summary.csv", "solution.json"] {
        assert!(out.join(name).exists(), "{name} missing");
    }

    let verify = |solution: &std::path::Path| {
        Command::new(exe)
            .args(["verify", "--case"])
            .arg(&case_path)
            .arg("--profiles")
            .arg(&profile_path)
            .arg("--solution")
            .arg(solution)
            .output()
            .unwrap()
    };
    assert!(verify(&out.join("solution.json")).status.success());

    let mut sol = read_solution(&out.join("solution.json")).unwrap();
    for ph in sol.dispatch[0][0].ph.iter_mut() {
        *ph *= 1.5;
    }
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, serde_json::to_string(&sol).unwrap()).unwrap();
    assert_eq!(verify(&bad).status.code(), Some(3));
}
