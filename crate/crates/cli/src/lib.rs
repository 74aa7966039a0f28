//! Batch front end for hydrogen-harvest studies: single scenarios, `(α, lm)`
//! sweeps, closed-loop verification of saved solutions and CSV tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use h2margin_core::network::{ieee39, load_case, parse_profiles, profile24, HourlyProfile, NetworkCase};
use h2margin_core::opf::{
    extract_solution, oracle_checks, solve_instance, HarvestSolution, HourlyCheck, Mode, ModelInstance, ScenarioConfig,
    VoltageLimitHit,
};
use h2margin_core::powerflow::PointClass;
use h2margin_nlp::SolverOptions;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Amount (pu) a voltage bound is pulled in after the continuation power
/// flow crossed it between the two operating points.
pub const VOLTAGE_BACKOFF: f64 = 1e-3;
/// Re-solves allowed per scenario while backing off voltage bounds.
pub const BACKOFF_ROUNDS: usize = 3;

/// Margin shortfall tolerated by verification.
pub const LM_TOLERANCE: f64 = 1e-3;
/// Newton mismatch a certified hour must reach.
pub const MISMATCH_TOLERANCE: f64 = 1e-8;
/// Mismatch allowed in the optimizer's own reported state before the file is
/// considered inconsistent with the network.
pub const REPORTED_MISMATCH_TOLERANCE: f64 = 1e-5;

/// Case and profiles from files, or the bundled 39-bus data when absent.
pub fn load_inputs(case: Option<&Path>, profiles: Option<&Path>) -> Result<(NetworkCase, Vec<HourlyProfile>)> {
    let case = match case {
        Some(p) => load_case(p).with_context(|| format!("loading case {}", p.display()))?,
        None => ieee39(),
    };
    let profiles = match profiles {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading profiles {}", p.display()))?;
            parse_profiles(&text).with_context(|| format!("parsing profiles {}", p.display()))?
        }
        None => profile24(),
    };
    Ok((case, profiles))
}

pub fn solver_options(seed: u64, starts: usize) -> SolverOptions {
    SolverOptions {
        seed,
        multi_start: starts.max(1),
        ..SolverOptions::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub alpha: f64,
    pub lm: f64,
    pub mode: Mode,
    pub seed: u64,
    pub starts: usize,
}

fn scenario(profiles: &[HourlyProfile], alpha: f64, lm: f64, mode: Mode) -> ScenarioConfig {
    ScenarioConfig::new(profiles.to_vec(), alpha, lm, mode)
}

/// Solve one scenario. With a warm start the flat start is solved as well
/// and the better of the two is returned.
pub fn run_scenario(
    case: &NetworkCase,
    profiles: &[HourlyProfile],
    spec: &RunSpec,
    warm: Option<&[f64]>,
) -> Result<HarvestSolution> {
    let inst = ModelInstance::assemble(case, &scenario(profiles, spec.alpha, spec.lm, spec.mode))?;
    let opts = solver_options(spec.seed, spec.starts);
    let flat = solve_instance(&inst, &opts, None);
    let best = match warm {
        None => flat?,
        Some(w) => {
            let warm = solve_instance(&inst, &opts, Some(w));
            match (flat, warm) {
                (Ok(f), Ok(w)) => {
                    let better = w.status.is_success()
                        && (!f.status.is_success() || inst.total_hydrogen(&w.x) > inst.total_hydrogen(&f.x) + 1e-6);
                    if better {
                        w
                    } else {
                        f
                    }
                }
                (Ok(f), Err(e)) => {
                    warn!("warm start failed: {e}");
                    f
                }
                (Err(e), Ok(w)) => {
                    warn!("flat start failed: {e}");
                    w
                }
                (Err(e), Err(_)) => return Err(e.into()),
            }
        }
    };
    let sol = extract_solution(&inst, &best, true);
    info!(
        "alpha {} lm {}: {} TH {:.1} kg in {} iterations",
        spec.alpha, spec.lm, sol.status, sol.total_hydrogen, sol.iterations
    );
    Ok(sol)
}

/// Solve and certify one scenario.
///
/// The optimizer only sees the two operating points of each hour, so a bus
/// voltage can leave its band somewhere between them. When the continuation
/// power flow stops on such a crossing, that bound is pulled in by
/// [`VOLTAGE_BACKOFF`] and the scenario is re-solved from the previous
/// solution. Verification always runs against the unmodified case.
pub fn solve_certified(
    case: &NetworkCase,
    profiles: &[HourlyProfile],
    spec: &RunSpec,
    warm: Option<&[f64]>,
) -> Result<(HarvestSolution, Result<VerificationReport>)> {
    let mut sol = run_scenario(case, profiles, spec, warm)?;
    let mut work = case.clone();
    for _ in 0..BACKOFF_ROUNDS {
        let report = match verify_solution(&sol, case, profiles) {
            Ok(r) => r,
            Err(e) => return Ok((sol, Err(e))),
        };
        let hits: Vec<VoltageLimitHit> = report
            .hours
            .iter()
            .filter(|h| !h.pass && h.check.oracle_lm.is_some())
            .filter_map(|h| h.check.voltage_limit)
            .collect();
        if report.pass || !sol.converged || hits.is_empty() {
            return Ok((sol, Ok(report)));
        }
        for hit in &hits {
            let bus = &mut work.buses[hit.bus];
            if hit.upper {
                bus.v_max -= VOLTAGE_BACKOFF;
            } else {
                bus.v_min += VOLTAGE_BACKOFF;
            }
            info!(
                "alpha {} lm {}: bus {} voltage band now [{:.4}, {:.4}]",
                spec.alpha, spec.lm, bus.id, bus.v_min, bus.v_max
            );
        }
        let next = run_scenario(&work, profiles, spec, Some(&sol.x))?;
        if !next.converged {
            warn!("alpha {} lm {}: re-solve with tightened voltage bands did not converge", spec.alpha, spec.lm);
            return Ok((sol, Ok(report)));
        }
        sol = next;
    }
    let report = verify_solution(&sol, case, profiles);
    Ok((sol, report))
}

// ---------------------------------------------------------------------------
// Verification

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourVerdict {
    pub check: HourlyCheck,
    pub pass: bool,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub lm_required: f64,
    pub hours: Vec<HourVerdict>,
    pub pass: bool,
}

impl VerificationReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("# verification against lm = {}\n", self.lm_required);
        s.push_str("hour,reported_mismatch,newton_mismatch,oracle_lm,stop,pass\n");
        for h in &self.hours {
            let c = &h.check;
            let _ = writeln!(
                s,
                "{},{:.3e},{},{},{},{}",
                c.hour,
                c.reported_mismatch,
                c.newton_mismatch.map(|m| format!("{m:.3e}")).unwrap_or_else(|| "-".into()),
                c.oracle_lm.map(|m| format!("{m:.6}")).unwrap_or_else(|| "-".into()),
                c.stop,
                if h.pass { "pass" } else { "FAIL" }
            );
        }
        let _ = writeln!(s, "overall,{}", if self.pass { "pass" } else { "FAIL" });
        s
    }
}

pub fn judge(check: &HourlyCheck, lm: f64) -> HourVerdict {
    let reason = if check.reported_mismatch > REPORTED_MISMATCH_TOLERANCE {
        Some(format!("reported state mismatch {:.3e}", check.reported_mismatch))
    } else {
        match (check.newton_mismatch, check.oracle_lm) {
            (None, _) => Some(format!("power flow failed: {}", check.stop)),
            (Some(m), _) if m >= MISMATCH_TOLERANCE => Some(format!("newton mismatch {m:.3e}")),
            (_, None) if lm > 0.0 => Some(format!("no margin: {}", check.stop)),
            (_, Some(l)) if l < lm - LM_TOLERANCE => Some(format!("margin {l:.5} below {lm}")),
            _ => None,
        }
    };
    HourVerdict {
        check: check.clone(),
        pass: reason.is_none(),
        reason,
    }
}

/// Re-certify a solution independently of the optimizer: Newton at every
/// hour's COP dispatch, then the continuation power flow.
pub fn verify_solution(sol: &HarvestSolution, case: &NetworkCase, profiles: &[HourlyProfile]) -> Result<VerificationReport> {
    let mut sc = scenario(profiles, sol.alpha, sol.lm_required, sol.mode);
    sc.horizon = sol.horizon;
    let inst = ModelInstance::assemble(case, &sc)?;
    let lay = &inst.layout;
    if sol.dispatch.len() != lay.horizon {
        bail!("stale solution: {} hours stored, {} expected", sol.dispatch.len(), lay.horizon);
    }
    for pts in &sol.dispatch {
        let p = &pts[0];
        if p.point_class != PointClass::Cop
            || p.v.len() != lay.nb
            || p.pg.len() != lay.ng
            || p.pw.len() != lay.nw
            || p.ph.len() != lay.ne
        {
            bail!("stale solution: dispatch dimensions do not match the case");
        }
    }
    let checks = oracle_checks(&inst, &sol.dispatch);
    let hours: Vec<HourVerdict> = checks.iter().map(|c| judge(c, sol.lm_required)).collect();
    let pass = hours.iter().all(|h| h.pass);
    Ok(VerificationReport {
        lm_required: sol.lm_required,
        hours,
        pass,
    })
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub alpha_values: Vec<f64>,
    pub lm_values: Vec<f64>,
    pub mode: Mode,
    pub seed: u64,
    pub starts: usize,
    /// Concurrent α groups; 0 picks the machine's parallelism.
    pub workers: usize,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_values.is_empty() || self.lm_values.is_empty() {
            bail!("sweep grids must be non-empty");
        }
        for &v in self.alpha_values.iter().chain(&self.lm_values) {
            if !(0.0..=1.0).contains(&v) {
                bail!("grid value {v} outside [0, 1]");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub alpha: f64,
    pub lm: f64,
    pub solution: Option<HarvestSolution>,
    pub verification: Option<VerificationReport>,
    pub error: Option<String>,
}

impl CellResult {
    pub fn status(&self) -> String {
        match (&self.solution, &self.error) {
            (Some(s), _) => s.status.clone(),
            (None, Some(_)) => "error".into(),
            (None, None) => "missing".into(),
        }
    }

    pub fn total_hydrogen(&self) -> Option<f64> {
        self.solution.as_ref().map(|s| s.total_hydrogen)
    }

    /// Smallest certified loading margin over the hours.
    pub fn oracle_lm(&self) -> Option<f64> {
        let v = self.verification.as_ref()?;
        v.hours.iter().map(|h| h.check.oracle_lm).try_fold(f64::INFINITY, |m, l| l.map(|l| m.min(l)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub spec: SweepSpec,
    pub config_hash: String,
    /// Grid order: α outer, lm inner, lm ascending.
    pub cells: Vec<CellResult>,
    pub system_base: f64,
}

impl SweepResult {
    pub fn cell(&self, alpha: f64, lm: f64) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| (c.alpha - alpha).abs() < 1e-12 && (c.lm - lm).abs() < 1e-12)
    }
}

/// Hash of everything that determines the numbers in the output tables.
pub fn config_hash<T: Serialize>(case: &NetworkCase, profiles: &[HourlyProfile], spec: &T) -> String {
    let mut h = Sha256::new();
    h.update(h2margin_core::network::case_to_toml(case).as_bytes());
    h.update(serde_json::to_vec(profiles).unwrap_or_default());
    h.update(serde_json::to_vec(spec).unwrap_or_default());
    h.update(VERSION.as_bytes());
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn alpha_group(case: &NetworkCase, profiles: &[HourlyProfile], spec: &SweepSpec, alpha: f64) -> Vec<CellResult> {
    let mut lms = spec.lm_values.clone();
    lms.sort_by(f64::total_cmp);
    lms.dedup();
    let mut warm: Option<Vec<f64>> = None;
    let mut out = Vec::new();
    for lm in lms {
        let run = RunSpec {
            alpha,
            lm,
            mode: spec.mode,
            seed: spec.seed,
            starts: spec.starts,
        };
        match solve_certified(case, profiles, &run, warm.as_deref()) {
            Ok((sol, report)) => {
                if sol.converged {
                    warm = Some(sol.x.clone());
                }
                let verification = match report {
                    Ok(v) => {
                        for h in v.hours.iter().filter(|h| !h.pass) {
                            let why = h.reason.as_deref().unwrap_or("");
                            warn!("alpha {alpha} lm {lm}: hour {} not certified ({}): {why}", h.check.hour, h.check.stop);
                        }
                        Some(v)
                    }
                    Err(e) => {
                        warn!("alpha {alpha} lm {lm}: verification failed: {e}");
                        None
                    }
                };
                out.push(CellResult {
                    alpha,
                    lm,
                    solution: Some(sol),
                    verification,
                    error: None,
                });
            }
            Err(e) => {
                warn!("alpha {alpha} lm {lm}: {e:#}");
                out.push(CellResult {
                    alpha,
                    lm,
                    solution: None,
                    verification: None,
                    error: Some(format!("{e:#}")),
                });
            }
        }
    }
    out
}

/// Solve every grid cell; α groups run concurrently, lm ascends within a
/// group with each cell warm-started from the previous one.
pub fn run_sweep(spec: &SweepSpec, case: &NetworkCase, profiles: &[HourlyProfile]) -> Result<SweepResult> {
    spec.validate()?;
    let mut alphas = spec.alpha_values.clone();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    let workers = if spec.workers == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        spec.workers
    };
    let mut groups: Vec<Vec<CellResult>> = Vec::with_capacity(alphas.len());
    for chunk in alphas.chunks(workers.max(1)) {
        let results: Vec<Vec<CellResult>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&a| s.spawn(move || alpha_group(case, profiles, spec, a)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
        });
        groups.extend(results);
    }
    Ok(SweepResult {
        spec: spec.clone(),
        config_hash: config_hash(case, profiles, spec),
        cells: groups.into_iter().flatten().collect(),
        system_base: case.system_base,
    })
}

fn header(hash: &str) -> String {
    format!("# h2margin {VERSION}\n# config {hash}\n")
}

fn write_atomic(path: &Path, body: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, body).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn csv_body<F>(head: &[&str], fill: F) -> Result<String>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<()>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(head)?;
    fill(&mut w)?;
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn num(v: f64) -> String {
    format!("{v:.6}")
}

pub fn th_table(result: &SweepResult) -> Result<String> {
    let body = csv_body(&["alpha", "lm", "TH_kg", "status", "oracle_lm", "verified"], |w| {
        for c in &result.cells {
            let th = c.total_hydrogen().map(|t| format!("{t:.3}")).unwrap_or_default();
            let lm = c.oracle_lm().map(num).unwrap_or_default();
            let verified = c.verification.as_ref().is_some_and(|v| v.pass);
            w.write_record([num(c.alpha), num(c.lm), th, c.status(), lm, verified.to_string()])?;
        }
        Ok(())
    })?;
    Ok(header(&result.config_hash) + &body)
}

pub fn allocation_table(result: &SweepResult) -> Result<String> {
    let body = csv_body(&["alpha", "lm", "bus", "size_MW"], |w| {
        for c in &result.cells {
            if let Some(s) = &c.solution {
                for a in &s.p2h_sizing {
                    w.write_record([num(c.alpha), num(c.lm), a.bus.to_string(), format!("{:.3}", a.size_mw)])?;
                }
            }
        }
        Ok(())
    })?;
    Ok(header(&result.config_hash) + &body)
}

pub fn hourly_table(result: &SweepResult) -> Result<String> {
    let body = csv_body(&["alpha", "lm", "hour", "PH_MW_total"], |w| {
        for c in &result.cells {
            if let Some(s) = &c.solution {
                for (t, mw) in s.hourly_p2h_mw(result.system_base).iter().enumerate() {
                    w.write_record([num(c.alpha), num(c.lm), (t + 1).to_string(), format!("{mw:.3}")])?;
                }
            }
        }
        Ok(())
    })?;
    Ok(header(&result.config_hash) + &body)
}

pub fn write_sweep_tables(out: &Path, result: &SweepResult) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let files = [
        ("th_vs_lm.csv", th_table(result)?),
        ("allocation.csv", allocation_table(result)?),
        ("hourly_p2h.csv", hourly_table(result)?),
    ];
    let mut paths = Vec::new();
    for (name, body) in files {
        let p = out.join(name);
        write_atomic(&p, &body)?;
        paths.push(p);
    }
    Ok(paths)
}

/// Hourly dispatch, hydrogen schedule, allocation summary and the solution
/// itself for a single scenario.
pub fn write_scenario_outputs(out: &Path, sol: &HarvestSolution, case: &NetworkCase, hash: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let base = case.system_base;
    let dispatch = csv_body(&["hour", "point", "bus", "V_pu", "theta_deg", "PG_MW", "QG_MVAr", "PW_MW", "PH_MW"], |w| {
        for pts in &sol.dispatch {
            for p in pts.iter() {
                for (b, bus) in case.buses.iter().enumerate() {
                    let sum = |vals: &[f64], at: &dyn Fn(usize) -> usize| -> f64 {
                        vals.iter().enumerate().filter(|(k, _)| at(*k) == b).map(|(_, v)| v * base).sum()
                    };
                    let pg = sum(&p.pg, &|g| case.generators[g].bus);
                    let qg = sum(&p.qg, &|g| case.generators[g].bus);
                    let pw = sum(&p.pw, &|w| case.wind_farms[w].bus);
                    let ph: f64 = sol
                        .electrolyzer_buses
                        .iter()
                        .zip(&p.ph)
                        .filter(|(id, _)| **id == bus.id)
                        .map(|(_, v)| v * base)
                        .sum();
                    w.write_record([
                        (p.hour + 1).to_string(),
                        p.point_class.as_str().to_string(),
                        bus.id.to_string(),
                        format!("{:.6}", p.v[b]),
                        format!("{:.6}", p.theta[b].to_degrees()),
                        format!("{pg:.4}"),
                        format!("{qg:.4}"),
                        format!("{pw:.4}"),
                        format!("{ph:.4}"),
                    ])?;
                }
            }
        }
        Ok(())
    })?;
    let schedule = csv_body(&["hour", "bus", "H2_kg"], |w| {
        for (e, row) in sol.hydrogen_schedule.iter().enumerate() {
            for (t, kg) in row.iter().enumerate() {
                w.write_record([(t + 1).to_string(), sol.electrolyzer_buses[e].to_string(), format!("{kg:.4}")])?;
            }
        }
        Ok(())
    })?;
    let allocation = csv_body(&["bus", "size_MW"], |w| {
        for a in &sol.p2h_sizing {
            w.write_record([a.bus.to_string(), format!("{:.3}", a.size_mw)])?;
        }
        Ok(())
    })?;
    let h = header(hash);
    let files = [
        ("hourly_dispatch.csv", h.clone() + &dispatch),
        ("hydrogen_schedule.csv", h.clone() + &schedule),
        ("allocation_summary.csv", h + &allocation),
        ("solution.json", serde_json::to_string_pretty(sol)?),
    ];
    let mut paths = Vec::new();
    for (name, body) in files {
        let p = out.join(name);
        write_atomic(&p, &body)?;
        paths.push(p);
    }
    Ok(paths)
}

pub fn read_solution(path: &Path) -> Result<HarvestSolution> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("stale or malformed solution file {}", path.display()))
}

pub fn case_info(case: &NetworkCase) -> String {
    let (pd, qd) = case.base_total_demand();
    let base = case.system_base;
    let mut s = String::new();
    let _ = writeln!(s, "case {} (base {} MVA)", case.name, base);
    let _ = writeln!(s, "buses {}  branches {}  generators {}", case.buses.len(), case.branches.len(), case.generators.len());
    let _ = writeln!(s, "wind farms {}  electrolyzers {}", case.wind_farms.len(), case.electrolyzers.len());
    let _ = writeln!(s, "slack bus {}", case.buses[case.slack_bus()].id);
    let _ = writeln!(s, "base demand {:.1} MW / {:.1} MVAr", pd * base, qd * base);
    let cap: f64 = case.generators.iter().map(|g| g.pg_max).sum();
    let _ = writeln!(s, "installed generation {:.1} MW", cap * base);
    let wind: f64 = case.wind_farms.iter().map(|w| w.capacity).sum();
    let _ = writeln!(s, "installed wind {:.1} MW", wind * base);
    s
}
