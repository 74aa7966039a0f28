use std::time::Instant;

use log::{debug, info, warn};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ipm::{InteriorPoint, IpmOutcome, IpmState};
use crate::options::SolverOptions;
use crate::problem::NlpProblem;
use crate::report::SolveReport;
use crate::NlpError;

const RESOLVE_BARRIER: f64 = 1e-6;

fn integrality_gap(x: &[f64], binaries: &[usize]) -> f64 {
    binaries
        .iter()
        .map(|&j| (x[j] - x[j] * x[j]).abs())
        .fold(0.0, f64::max)
}

/// Solve `problem` from `x0`.
///
/// Without binaries this is a single barrier solve. Otherwise the relaxation
/// is solved first, then re-solved under an increasing penalty on `y − y²`,
/// the binaries are rounded at `opts.rounding_threshold` and the continuous
/// part is polished with them fixed.
pub fn solve<P: NlpProblem + ?Sized>(
    problem: &P,
    x0: &[f64],
    opts: &SolverOptions,
) -> Result<SolveReport, NlpError> {
    opts.validate()?;
    let started = Instant::now();
    let n = problem.num_variables();
    if x0.len() != n {
        return Err(NlpError::Dimension(format!(
            "starting point has {} entries, problem has {n} variables",
            x0.len()
        )));
    }
    let mut xl = vec![0.0; n];
    let mut xu = vec![0.0; n];
    problem.variable_bounds(&mut xl, &mut xu);
    let binaries = problem.binary_variables();
    for &j in &binaries {
        if j >= n {
            return Err(NlpError::Dimension(format!("binary index {j} out of range")));
        }
    }

    let mut log = Vec::new();
    let mut iterations = 0usize;

    if binaries.is_empty() {
        let ipm = InteriorPoint::new(problem, opts, xl, xu, 0.0, Vec::new())?;
        let out = ipm.solve(x0, None)?;
        iterations += out.iterations;
        log.extend(out.log.iter().cloned());
        return Ok(build_report(problem, out, 0.0, &binaries, false, iterations, log, started));
    }

    // Homotopy on the penalty weight.
    let mut state: Option<IpmState> = None;
    let mut relaxed: Option<IpmState> = None;
    let mut x = x0.to_vec();
    let mut rho = 0.0;
    let mut gap;
    loop {
        let ipm = InteriorPoint::new(problem, opts, xl.clone(), xu.clone(), rho, binaries.clone())?;
        let out = ipm.solve(&x, state.as_ref())?;
        iterations += out.iterations;
        log.extend(out.log.iter().cloned());
        let ok = out.status.is_success();
        debug!(
            "homotopy rho {rho:.1e}: {} in {} iterations, gap {:.2e}",
            out.status,
            out.iterations,
            integrality_gap(&out.state.x, &binaries)
        );
        if ok && relaxed.is_none() {
            relaxed = Some(out.state.clone());
        }
        if ok || state.is_none() {
            x = out.state.x.clone();
            state = Some(out.state);
        }
        gap = integrality_gap(&x, &binaries);
        if gap <= opts.integrality_tol {
            break;
        }
        rho = if rho == 0.0 {
            opts.penalty.initial
        } else {
            rho * opts.penalty.growth
        };
        if rho > opts.penalty.max * (1.0 + 1e-12) {
            break;
        }
    }
    let warm = state.expect("homotopy ran at least once");
    if gap > opts.integrality_tol {
        let stuck: Vec<(usize, f64)> = binaries
            .iter()
            .filter(|&&j| (x[j] - x[j] * x[j]).abs() > opts.integrality_tol)
            .map(|&j| (j, x[j]))
            .collect();
        debug!("fractional binaries after the homotopy: {stuck:?}");
    }

    let polish = |values: &[f64], from: &IpmState, log: &mut Vec<_>, iterations: &mut usize| -> Result<IpmOutcome, NlpError> {
        let mut pl = xl.clone();
        let mut pu = xu.clone();
        let mut start = from.x.clone();
        for (k, &j) in binaries.iter().enumerate() {
            pl[j] = values[k];
            pu[j] = values[k];
            start[j] = values[k];
        }
        let ipm = InteriorPoint::new(problem, opts, pl, pu, 0.0, Vec::new())?;
        let out = ipm.solve(&start, Some(from))?;
        *iterations += out.iterations;
        log.extend(out.log.iter().cloned());
        Ok(out)
    };

    // Round and polish.
    let rounded: Vec<f64> = binaries
        .iter()
        .map(|&j| if x[j] >= opts.rounding_threshold { 1.0 } else { 0.0 })
        .collect();
    let first = polish(&rounded, &warm, &mut log, &mut iterations)?;
    if first.status.is_success() {
        return Ok(build_report(problem, first, gap, &binaries, false, iterations, log, started));
    }
    warn!("polish with rounded binaries ended with {}; trying repaired binaries", first.status);

    // Binaries implied by the penalized end point and by the plain
    // relaxation, each polished from the state it was read off.
    let mut tried = vec![rounded];
    let mut best: Option<IpmOutcome> = None;
    for from in [Some(&warm), relaxed.as_ref()].into_iter().flatten() {
        let Some(repaired) = problem.repair_binaries(&from.x) else {
            continue;
        };
        if repaired.len() != binaries.len() || tried.contains(&repaired) {
            continue;
        }
        let out = polish(&repaired, from, &mut log, &mut iterations)?;
        debug!("repaired polish: {} with objective {:.6e}", out.status, problem.objective(&out.state.x));
        tried.push(repaired);
        let better = match &best {
            None => true,
            Some(b) => match (out.status.is_success(), b.status.is_success()) {
                (true, false) => true,
                (false, true) => false,
                (true, true) => problem.objective(&out.state.x) < problem.objective(&b.state.x),
                (false, false) => out.violation < b.violation,
            },
        };
        if better {
            best = Some(out);
        }
    }
    match best {
        Some(b) if b.status.is_success() || b.violation < first.violation => {
            Ok(build_report(problem, b, gap, &binaries, true, iterations, log, started))
        }
        _ => Ok(build_report(problem, first, gap, &binaries, false, iterations, log, started)),
    }
}

/// Re-solve from a previous report with every binary fixed at its reported
/// value, warm-starting primal and dual variables. Used after a change to
/// the problem data that leaves the binary pattern valid.
pub fn resolve_fixed<P: NlpProblem + ?Sized>(
    problem: &P,
    previous: &SolveReport,
    opts: &SolverOptions,
) -> Result<SolveReport, NlpError> {
    opts.validate()?;
    let started = Instant::now();
    let n = problem.num_variables();
    if previous.x.len() != n || previous.multipliers.len() != problem.num_constraints() {
        return Err(NlpError::Dimension("previous report does not match the problem".into()));
    }
    let mut xl = vec![0.0; n];
    let mut xu = vec![0.0; n];
    problem.variable_bounds(&mut xl, &mut xu);
    let binaries = problem.binary_variables();
    let mut x = previous.x.clone();
    for &j in &binaries {
        let v = if x[j] >= opts.rounding_threshold { 1.0 } else { 0.0 };
        xl[j] = v;
        xu[j] = v;
        x[j] = v;
    }
    let warm = IpmState {
        x: x.clone(),
        y: previous.multipliers.clone(),
        z_lower: previous.z_lower.clone(),
        z_upper: previous.z_upper.clone(),
    };
    // The previous point is close to optimal for the new data, so restart
    // the barrier close to where it ended.
    let mut local = opts.clone();
    local.barrier.warm_initial = opts.barrier.warm_initial.min(RESOLVE_BARRIER);
    let ipm = InteriorPoint::new(problem, &local, xl, xu, 0.0, Vec::new())?;
    let out = ipm.solve(&x, Some(&warm))?;
    let iterations = out.iterations;
    let log = out.log.clone();
    Ok(build_report(problem, out, previous.integrality_gap, &binaries, previous.repaired, iterations, log, started))
}

#[allow(clippy::too_many_arguments)]
fn build_report<P: NlpProblem + ?Sized>(
    problem: &P,
    out: IpmOutcome,
    gap: f64,
    binaries: &[usize],
    repaired: bool,
    iterations: usize,
    log: Vec<crate::report::IterationRecord>,
    started: Instant,
) -> SolveReport {
    let objective = problem.objective(&out.state.x);
    let final_gap = integrality_gap(&out.state.x, binaries);
    SolveReport {
        status: out.status,
        objective,
        kkt_residual: out.kkt_residual,
        violation: out.violation,
        integrality_gap: gap,
        final_integrality_gap: final_gap,
        repaired,
        iterations,
        wall_time: started.elapsed(),
        log,
        start_index: 0,
        x: out.state.x,
        multipliers: out.state.y,
        z_lower: out.state.z_lower,
        z_upper: out.state.z_upper,
    }
}

/// Max-norm of the Lagrangian gradient `∇f + Jᵀy − z_l + z_u` over variables
/// that are not fixed by their bounds.
pub fn kkt_residual<P: NlpProblem + ?Sized>(
    problem: &P,
    x: &[f64],
    multipliers: &[f64],
    z_lower: &[f64],
    z_upper: &[f64],
) -> f64 {
    let n = problem.num_variables();
    let mut g = vec![0.0; n];
    problem.objective_gradient(x, &mut g);
    let structure = problem.jacobian_structure();
    let mut vals = vec![0.0; structure.len()];
    problem.jacobian_values(x, &mut vals);
    for (k, &(i, j)) in structure.iter().enumerate() {
        g[j] += vals[k] * multipliers[i];
    }
    let mut xl = vec![0.0; n];
    let mut xu = vec![0.0; n];
    problem.variable_bounds(&mut xl, &mut xu);
    (0..n)
        .filter(|&j| xl[j] < xu[j])
        .map(|j| (g[j] - z_lower[j] + z_upper[j]).abs())
        .fold(0.0, f64::max)
}

/// Runs [`solve`] from `x0` and from `opts.multi_start - 1` perturbed copies
/// of it, returning the best successful candidate.
///
/// Candidate `k > 0` scales each entry by `1 + u` with `u` uniform in
/// `±opts.perturbation`, drawn from a generator seeded with `opts.seed + k`,
/// so results do not depend on thread scheduling.
pub fn multi_start<P: NlpProblem + ?Sized>(
    problem: &P,
    x0: &[f64],
    opts: &SolverOptions,
) -> Result<SolveReport, NlpError> {
    opts.validate()?;
    let n = problem.num_variables();
    let mut xl = vec![0.0; n];
    let mut xu = vec![0.0; n];
    problem.variable_bounds(&mut xl, &mut xu);
    let starts: Vec<Vec<f64>> = (0..opts.multi_start)
        .map(|k| {
            if k == 0 {
                return x0.to_vec();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(k as u64));
            x0.iter()
                .enumerate()
                .map(|(j, &v)| {
                    let u: f64 = rng.random_range(-opts.perturbation..=opts.perturbation);
                    let p = if v.abs() > 1e-8 { v * (1.0 + u) } else { u };
                    p.clamp(xl[j], xu[j])
                })
                .collect()
        })
        .collect();

    let results: Vec<Result<SolveReport, NlpError>> = if opts.parallel && starts.len() > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = starts
                .iter()
                .map(|s| scope.spawn(move || solve(problem, s, opts)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("multi-start worker panicked"))
                .collect()
        })
    } else {
        starts.iter().map(|s| solve(problem, s, opts)).collect()
    };

    let mut best: Option<SolveReport> = None;
    let mut first_err = None;
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(mut rep) => {
                rep.start_index = k;
                let better = match &best {
                    None => true,
                    Some(b) => match (rep.status.is_success(), b.status.is_success()) {
                        (true, false) => true,
                        (false, true) => false,
                        (true, true) => rep.objective < b.objective - 1e-9 * b.objective.abs().max(1.0),
                        (false, false) => rep.violation < b.violation,
                    },
                };
                if better {
                    best = Some(rep);
                }
            }
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    match best {
        Some(b) => {
            info!(
                "multi-start: best of {} is candidate {} ({}, f = {:.8e})",
                opts.multi_start, b.start_index, b.status, b.objective
            );
            Ok(b)
        }
        None => Err(first_err.unwrap_or_else(|| NlpError::InvalidOptions("no starts".into()))),
    }
}
