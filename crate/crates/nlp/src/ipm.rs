//! Primal-dual interior-point method with a filter line search.
//!
//! Inequality rows get explicit slacks, `c(x) - s = 0`, so every bound in the
//! barrier subproblem is a simple bound on `x` or `s`. The slack block is
//! eliminated before factorization, leaving the quasi-definite system
//!
//! ```txt
//!   [ W + Σx + δw I      Jᵀ   ] [dx]     [ ∇φ + Jᵀy ]
//!   [       J          -D     ] [dy] = - [   r_c    ]
//! ```
//!
//! which is factored by sparse LDLᵀ; `D` carries `1/(Σs + δw)` for inequality
//! rows and a small static `δc` everywhere.

use std::time::Instant;

use log::{debug, trace};

use crate::filter::{sufficient_progress, Filter, GAMMA_PHI, GAMMA_THETA};
use crate::ldl::{LdlFactor, SymbolicLdl};
use crate::options::SolverOptions;
use crate::problem::NlpProblem;
use crate::report::{IterationRecord, SolveStatus};
use crate::NlpError;

const KAPPA_EPS: f64 = 10.0;
const KAPPA_SIGMA: f64 = 1e10;
const TAU_MIN: f64 = 0.99;
const BOUND_PUSH: f64 = 1e-2;
const WARM_BOUND_PUSH: f64 = 1e-9;
const DELTA_C: f64 = 1e-8;
const DELTA_W_INIT: f64 = 1e-4;
const DELTA_W_MIN: f64 = 1e-20;
const DELTA_W_MAX: f64 = 1e40;
const S_MAX: f64 = 100.0;
const S_THETA: f64 = 1.1;
const S_PHI: f64 = 2.3;
const ETA_PHI: f64 = 1e-8;
const DELTA_SWITCH: f64 = 1.0;
const GAMMA_ALPHA: f64 = 0.05;
const MAX_SOC: usize = 4;
const KAPPA_SOC: f64 = 0.99;
const MAX_RESTORATION_ITERS: usize = 300;
const RESTORATION_STALL: usize = 25;
const REFINEMENT_STEPS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RowKind {
    Equality,
    Inequality(usize),
    Inactive,
}

/// Primal and dual state of the barrier iteration, in original indexing.
#[derive(Debug, Clone)]
pub struct IpmState {
    pub x: Vec<f64>,
    /// Constraint multipliers (Lagrangian `f + yᵀc`).
    pub y: Vec<f64>,
    pub z_lower: Vec<f64>,
    pub z_upper: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct IpmOutcome {
    pub state: IpmState,
    pub status: SolveStatus,
    pub iterations: usize,
    pub objective: f64,
    pub kkt_residual: f64,
    pub violation: f64,
    pub log: Vec<IterationRecord>,
}

/// One barrier solve with fixed penalty weight `rho` on `binaries`.
pub struct InteriorPoint<'a, P: NlpProblem + ?Sized> {
    problem: &'a P,
    opts: &'a SolverOptions,
    n: usize,
    m: usize,
    xl: Vec<f64>,
    xu: Vec<f64>,
    cl: Vec<f64>,
    cu: Vec<f64>,
    free: Vec<usize>,
    free_pos: Vec<Option<usize>>,
    row_kind: Vec<RowKind>,
    active_rows: Vec<usize>,
    n_slack: usize,
    slack_row: Vec<usize>,
    jac_rows: Vec<usize>,
    jac_cols: Vec<usize>,
    /// KKT coordinate of each Jacobian entry, if the entry survives.
    jac_coord: Vec<Option<usize>>,
    hess_coord: Vec<Option<usize>>,
    n_hess: usize,
    symbolic: SymbolicLdl,
    rho: f64,
    binaries: Vec<usize>,
}

struct Eval {
    f: f64,
    grad: Vec<f64>,
    c: Vec<f64>,
}

struct Direction {
    dx: Vec<f64>,
    ds: Vec<f64>,
    dy: Vec<f64>,
    dzl: Vec<f64>,
    dzu: Vec<f64>,
    dvl: Vec<f64>,
    dvu: Vec<f64>,
}

impl<'a, P: NlpProblem + ?Sized> InteriorPoint<'a, P> {
    pub fn new(
        problem: &'a P,
        opts: &'a SolverOptions,
        xl: Vec<f64>,
        xu: Vec<f64>,
        rho: f64,
        binaries: Vec<usize>,
    ) -> Result<Self, NlpError> {
        let n = problem.num_variables();
        let m = problem.num_constraints();
        if xl.len() != n || xu.len() != n {
            return Err(NlpError::Dimension("variable bounds".into()));
        }
        for j in 0..n {
            if xl[j] > xu[j] {
                return Err(NlpError::InconsistentBounds(format!(
                    "variable {j}: lower {} > upper {}",
                    xl[j], xu[j]
                )));
            }
        }
        let mut cl = vec![0.0; m];
        let mut cu = vec![0.0; m];
        problem.constraint_bounds(&mut cl, &mut cu);
        let mut free = Vec::new();
        let mut free_pos = vec![None; n];
        for j in 0..n {
            if xl[j] < xu[j] {
                free_pos[j] = Some(free.len());
                free.push(j);
            }
        }
        let mut row_kind = vec![RowKind::Inactive; m];
        let mut active_rows = Vec::new();
        let mut slack_row = Vec::new();
        let mut active_pos = vec![usize::MAX; m];
        for i in 0..m {
            if cl[i] > cu[i] {
                return Err(NlpError::InconsistentBounds(format!(
                    "constraint {i}: lower {} > upper {}",
                    cl[i], cu[i]
                )));
            }
            if cl[i] == cu[i] {
                row_kind[i] = RowKind::Equality;
            } else if cl[i].is_finite() || cu[i].is_finite() {
                row_kind[i] = RowKind::Inequality(slack_row.len());
                slack_row.push(i);
            } else {
                continue;
            }
            active_pos[i] = active_rows.len();
            active_rows.push(i);
        }
        let nf = free.len();
        let jac = problem.jacobian_structure();
        let hess = problem.hessian_structure();
        let mut coords = Vec::with_capacity(jac.len() + hess.len());
        let mut hess_coord = Vec::with_capacity(hess.len());
        for &(i, j) in &hess {
            match (free_pos[i], free_pos[j]) {
                (Some(a), Some(b)) => {
                    hess_coord.push(Some(coords.len()));
                    coords.push((a, b));
                }
                _ => hess_coord.push(None),
            }
        }
        let n_hess = coords.len();
        let mut jac_coord = Vec::with_capacity(jac.len());
        let mut jac_rows = Vec::with_capacity(jac.len());
        let mut jac_cols = Vec::with_capacity(jac.len());
        for &(r, col) in &jac {
            if r >= m || col >= n {
                return Err(NlpError::Dimension(format!("jacobian entry ({r}, {col})")));
            }
            jac_rows.push(r);
            jac_cols.push(col);
            match (row_kind[r], free_pos[col]) {
                (RowKind::Inactive, _) | (_, None) => jac_coord.push(None),
                (_, Some(fc)) => {
                    jac_coord.push(Some(coords.len()));
                    coords.push((nf + active_pos[r], fc));
                }
            }
        }
        let symbolic = SymbolicLdl::new(nf + active_rows.len(), &coords)?;
        debug!(
            "kkt: {} free vars, {} rows ({} slacks), L nnz {}",
            nf,
            active_rows.len(),
            slack_row.len(),
            symbolic.factor_nnz()
        );
        Ok(Self {
            problem,
            opts,
            n,
            m,
            xl,
            xu,
            cl,
            cu,
            free,
            free_pos,
            row_kind,
            active_rows,
            n_slack: slack_row.len(),
            slack_row,
            jac_rows,
            jac_cols,
            jac_coord,
            hess_coord,
            n_hess,
            symbolic,
            rho,
            binaries,
        })
    }

    fn evaluate(&self, x: &[f64]) -> Eval {
        let mut grad = vec![0.0; self.n];
        self.problem.objective_gradient(x, &mut grad);
        let mut f = self.problem.objective(x);
        if self.rho > 0.0 {
            for &j in &self.binaries {
                let b = x[j] - x[j] * x[j];
                f += self.rho * b * b;
                grad[j] += self.rho * 2.0 * b * (1.0 - 2.0 * x[j]);
            }
        }
        let mut c = vec![0.0; self.m];
        self.problem.constraints(x, &mut c);
        Eval { f, grad, c }
    }

    fn penalty_curvature(&self, xj: f64) -> f64 {
        let b = xj - xj * xj;
        let db = 1.0 - 2.0 * xj;
        self.rho * (2.0 * db * db - 4.0 * b)
    }

    /// Constraint residual on active rows: `c - cl` for equalities and
    /// `c - s` for inequalities.
    fn residual(&self, c: &[f64], s: &[f64]) -> Vec<f64> {
        self.active_rows
            .iter()
            .map(|&i| match self.row_kind[i] {
                RowKind::Equality => c[i] - self.cl[i],
                RowKind::Inequality(k) => c[i] - s[k],
                RowKind::Inactive => 0.0,
            })
            .collect()
    }

    fn barrier(&self, f: f64, x: &[f64], s: &[f64], mu: f64) -> f64 {
        let mut phi = f;
        for &j in &self.free {
            if self.xl[j].is_finite() {
                phi -= mu * (x[j] - self.xl[j]).ln();
            }
            if self.xu[j].is_finite() {
                phi -= mu * (self.xu[j] - x[j]).ln();
            }
        }
        for (k, &i) in self.slack_row.iter().enumerate() {
            if self.cl[i].is_finite() {
                phi -= mu * (s[k] - self.cl[i]).ln();
            }
            if self.cu[i].is_finite() {
                phi -= mu * (self.cu[i] - s[k]).ln();
            }
        }
        if phi.is_nan() {
            f64::INFINITY
        } else {
            phi
        }
    }

    fn jacobian(&self, x: &[f64]) -> Vec<f64> {
        let mut vals = vec![0.0; self.jac_rows.len()];
        self.problem.jacobian_values(x, &mut vals);
        vals
    }

    /// `Jᵀy` over all variables.
    fn jt_y(&self, jac: &[f64], y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (k, &v) in jac.iter().enumerate() {
            out[self.jac_cols[k]] += v * y[self.jac_rows[k]];
        }
        out
    }

    fn push_into_interior(&self, v: f64, lo: f64, hi: f64, push: f64) -> f64 {
        let mut v = v;
        if lo.is_finite() && hi.is_finite() {
            let pl = (push * lo.abs().max(1.0)).min(push * (hi - lo));
            let pu = (push * hi.abs().max(1.0)).min(push * (hi - lo));
            v = v.max(lo + pl).min(hi - pu);
            if !(v > lo && v < hi) {
                v = 0.5 * (lo + hi);
            }
        } else if lo.is_finite() {
            v = v.max(lo + push * lo.abs().max(1.0));
        } else if hi.is_finite() {
            v = v.min(hi - push * hi.abs().max(1.0));
        }
        v
    }

    /// Runs the barrier method from `x0`. `warm` supplies duals from a
    /// previous solve of a nearby problem.
    pub fn solve(&self, x0: &[f64], warm: Option<&IpmState>) -> Result<IpmOutcome, NlpError> {
        let started = Instant::now();
        let opts = self.opts;
        let n = self.n;
        let nf = self.free.len();
        let push = if warm.is_some() { WARM_BOUND_PUSH } else { BOUND_PUSH };
        let mut mu = if warm.is_some() {
            opts.barrier.warm_initial
        } else {
            opts.barrier.initial
        };
        let mu_min = opts.optimality_tol.min(opts.complementarity_tol) / 10.0;

        // Primal start.
        let mut x: Vec<f64> = x0.to_vec();
        for j in 0..n {
            if self.free_pos[j].is_none() {
                x[j] = self.xl[j];
            } else {
                x[j] = self.push_into_interior(x[j], self.xl[j], self.xu[j], push);
            }
        }
        let mut ev = self.evaluate(&x);
        if !ev.f.is_finite() || ev.c.iter().any(|v| !v.is_finite()) {
            return Err(NlpError::Evaluation("non-finite value at the starting point".into()));
        }
        let mut s: Vec<f64> = self
            .slack_row
            .iter()
            .map(|&i| self.push_into_interior(ev.c[i], self.cl[i], self.cu[i], push))
            .collect();

        // Bound multipliers.
        let mut zl = vec![0.0; n];
        let mut zu = vec![0.0; n];
        for &j in &self.free {
            if self.xl[j].is_finite() {
                zl[j] = match warm {
                    Some(w) if w.z_lower[j] > 0.0 => w.z_lower[j],
                    Some(_) => mu / (x[j] - self.xl[j]),
                    None => 1.0,
                };
            }
            if self.xu[j].is_finite() {
                zu[j] = match warm {
                    Some(w) if w.z_upper[j] > 0.0 => w.z_upper[j],
                    Some(_) => mu / (self.xu[j] - x[j]),
                    None => 1.0,
                };
            }
        }
        let mut vl = vec![0.0; self.n_slack];
        let mut vu = vec![0.0; self.n_slack];
        let mut y = vec![0.0; self.m];
        for (k, &i) in self.slack_row.iter().enumerate() {
            let yi = warm.map(|w| w.y[i]).unwrap_or(0.0);
            // Slack stationarity: -y - vl + vu = 0.
            if self.cl[i].is_finite() {
                vl[k] = if warm.is_some() {
                    (-yi).max(mu / (s[k] - self.cl[i]))
                } else {
                    1.0
                };
            }
            if self.cu[i].is_finite() {
                vu[k] = if warm.is_some() {
                    yi.max(mu / (self.cu[i] - s[k]))
                } else {
                    1.0
                };
            }
        }
        let mut jac = self.jacobian(&x);
        match warm {
            Some(w) => {
                for &i in &self.active_rows {
                    y[i] = w.y[i];
                }
            }
            None => {
                y = self.least_squares_multipliers(&ev, &jac, &zl, &zu, &vl, &vu)?;
            }
        }

        let mut theta = l1(&self.residual(&ev.c, &s));
        let theta_max = 1e4 * theta.max(1.0);
        let theta_min = 1e-4 * theta.max(1.0);
        let mut filter = Filter::new(theta_max);
        let mut log = Vec::new();
        let mut delta_w_last = 0.0;
        let mut restorations = 0usize;
        let mut status = SolveStatus::IterationLimit;
        let mut iter = 0usize;
        let mut filter_reset = false;
        let mut in_restoration_record = false;

        loop {
            // Optimality measures.
            let jty = self.jt_y(&jac, &y);
            let mut dual_inf = 0.0f64;
            for &j in &self.free {
                let g = ev.grad[j] + jty[j] - zl[j] + zu[j];
                dual_inf = dual_inf.max(g.abs());
            }
            for (k, &i) in self.slack_row.iter().enumerate() {
                let g = -y[i] - vl[k] + vu[k];
                dual_inf = dual_inf.max(g.abs());
            }
            let r = self.residual(&ev.c, &s);
            let primal_inf = linf(&r);
            theta = l1(&r);
            let z_l1: f64 = zl.iter().chain(&zu).chain(&vl).chain(&vu).map(|v| v.abs()).sum();
            let y_l1: f64 = y.iter().map(|v| v.abs()).sum();
            let count = (nf + self.active_rows.len() + 2 * self.n_slack).max(1) as f64;
            let s_d = ((y_l1 + z_l1) / count).max(S_MAX) / S_MAX;
            let s_c = (z_l1 / (2 * nf + 2 * self.n_slack).max(1) as f64).max(S_MAX) / S_MAX;
            let compl = |target: f64| -> f64 {
                let mut e = 0.0f64;
                for &j in &self.free {
                    if self.xl[j].is_finite() {
                        e = e.max(((x[j] - self.xl[j]) * zl[j] - target).abs());
                    }
                    if self.xu[j].is_finite() {
                        e = e.max(((self.xu[j] - x[j]) * zu[j] - target).abs());
                    }
                }
                for (k, &i) in self.slack_row.iter().enumerate() {
                    if self.cl[i].is_finite() {
                        e = e.max(((s[k] - self.cl[i]) * vl[k] - target).abs());
                    }
                    if self.cu[i].is_finite() {
                        e = e.max(((self.cu[i] - s[k]) * vu[k] - target).abs());
                    }
                }
                e
            };
            let compl0 = compl(0.0);
            let kkt = (dual_inf / s_d).max(compl0 / s_c);

            log.push(IterationRecord {
                iteration: iter,
                mu,
                rho: self.rho,
                violation: primal_inf,
                objective: ev.f,
                dual_infeasibility: dual_inf / s_d,
                theta,
                phi: self.barrier(ev.f, &x, &s, mu),
                step: log.last().map(|r: &IterationRecord| r.step).unwrap_or(0.0),
                restoration: in_restoration_record,
                filter_reset,
            });
            filter_reset = false;
            in_restoration_record = false;
            trace!(
                "it {iter:4} mu {mu:.2e} f {:.6e} inf_pr {primal_inf:.2e} inf_du {:.2e} compl {compl0:.2e}",
                ev.f,
                dual_inf / s_d
            );

            if dual_inf / s_d <= opts.optimality_tol
                && primal_inf <= opts.feasibility_tol
                && compl0 / s_c <= opts.complementarity_tol
            {
                status = if self.problem.is_convex() {
                    SolveStatus::Optimal
                } else {
                    SolveStatus::LocallyOptimal
                };
                let state = IpmState {
                    x: x.clone(),
                    y: y.clone(),
                    z_lower: zl.clone(),
                    z_upper: zu.clone(),
                };
                return Ok(self.finish(state, status, iter, ev.f, kkt, primal_inf, log, started));
            }
            if iter >= opts.max_iterations {
                break;
            }

            // Barrier update (possibly several reductions at once).
            let mut mu_changed = false;
            loop {
                let e_mu = (dual_inf / s_d).max(primal_inf).max(compl(mu) / s_c);
                if mu > mu_min && e_mu <= KAPPA_EPS * mu {
                    mu = mu_min.max((opts.barrier.reduction * mu).min(mu.powf(opts.barrier.exponent)));
                    mu_changed = true;
                } else {
                    break;
                }
            }
            if mu_changed {
                filter.reset(theta_max);
                filter_reset = true;
            }
            let tau = TAU_MIN.max(1.0 - mu);

            // Newton direction.
            let hess_vals = self.hessian(&x, &y);
            let (dir, delta_w) = match self.direction(
                &x, &s, &y, &zl, &zu, &vl, &vu, &ev, &jac, &hess_vals, mu, delta_w_last,
            ) {
                Some(d) => d,
                None => {
                    status = SolveStatus::NumericalFailure;
                    break;
                }
            };
            if delta_w > 0.0 {
                delta_w_last = delta_w;
            }

            // Fraction to the boundary.
            let mut alpha_max = 1.0f64;
            for &j in &self.free {
                let d = dir.dx[j];
                if self.xl[j].is_finite() && d < 0.0 {
                    alpha_max = alpha_max.min(-tau * (x[j] - self.xl[j]) / d);
                }
                if self.xu[j].is_finite() && d > 0.0 {
                    alpha_max = alpha_max.min(tau * (self.xu[j] - x[j]) / d);
                }
            }
            for (k, &i) in self.slack_row.iter().enumerate() {
                let d = dir.ds[k];
                if self.cl[i].is_finite() && d < 0.0 {
                    alpha_max = alpha_max.min(-tau * (s[k] - self.cl[i]) / d);
                }
                if self.cu[i].is_finite() && d > 0.0 {
                    alpha_max = alpha_max.min(tau * (self.cu[i] - s[k]) / d);
                }
            }
            let mut alpha_z = 1.0f64;
            for (z, dz) in zl.iter().zip(&dir.dzl).chain(zu.iter().zip(&dir.dzu)) {
                if *dz < 0.0 && *z > 0.0 {
                    alpha_z = alpha_z.min(-tau * z / dz);
                }
            }
            for (v, dv) in vl.iter().zip(&dir.dvl).chain(vu.iter().zip(&dir.dvu)) {
                if *dv < 0.0 && *v > 0.0 {
                    alpha_z = alpha_z.min(-tau * v / dv);
                }
            }

            // Barrier gradient along the direction.
            let phi = self.barrier(ev.f, &x, &s, mu);
            let mut grad_phi_d = 0.0;
            for &j in &self.free {
                let mut g = ev.grad[j];
                if self.xl[j].is_finite() {
                    g -= mu / (x[j] - self.xl[j]);
                }
                if self.xu[j].is_finite() {
                    g += mu / (self.xu[j] - x[j]);
                }
                grad_phi_d += g * dir.dx[j];
            }
            for (k, &i) in self.slack_row.iter().enumerate() {
                let mut g = 0.0;
                if self.cl[i].is_finite() {
                    g -= mu / (s[k] - self.cl[i]);
                }
                if self.cu[i].is_finite() {
                    g += mu / (self.cu[i] - s[k]);
                }
                grad_phi_d += g * dir.ds[k];
            }

            // Tiny steps are accepted outright.
            let tiny = self
                .free
                .iter()
                .all(|&j| dir.dx[j].abs() <= 10.0 * f64::EPSILON * (1.0 + x[j].abs()));

            let mut accepted: Option<(Vec<f64>, Vec<f64>, Eval, f64)> = None;
            let mut alpha = alpha_max;
            if tiny {
                let xt = axpy(&x, alpha, &dir.dx);
                let st = axpy(&s, alpha, &dir.ds);
                let et = self.evaluate(&xt);
                accepted = Some((xt, st, et, alpha));
            } else {
                let alpha_min = {
                    let base = if grad_phi_d < 0.0 {
                        GAMMA_THETA
                            .min(GAMMA_PHI * theta / -grad_phi_d)
                            .min(DELTA_SWITCH * theta.powf(S_THETA) / (-grad_phi_d).powf(S_PHI))
                    } else {
                        GAMMA_THETA
                    };
                    GAMMA_ALPHA * base
                };
                let mut first = true;
                while alpha >= alpha_min {
                    let xt = axpy(&x, alpha, &dir.dx);
                    let st = axpy(&s, alpha, &dir.ds);
                    let et = self.evaluate(&xt);
                    let theta_t = l1(&self.residual(&et.c, &st));
                    let phi_t = self.barrier(et.f, &xt, &st, mu);
                    if let Some(f_type) = self.acceptable(
                        &filter, theta, phi, grad_phi_d, alpha, theta_t, phi_t, theta_min,
                    ) {
                        if !f_type {
                            filter.augment(theta, phi);
                        }
                        accepted = Some((xt, st, et, alpha));
                        break;
                    }
                    // Second-order correction on the first trial.
                    if first && theta_t >= theta {
                        if let Some(res) = self.second_order_correction(
                            &x, &s, &y, &zl, &zu, &vl, &vu, &ev, &jac, &hess_vals, mu, delta_w,
                            &dir, alpha, tau, theta, phi, grad_phi_d, theta_min, &filter, et,
                        ) {
                            let (xs, ss, es, a_soc, f_type) = res;
                            if !f_type {
                                filter.augment(theta, phi);
                            }
                            accepted = Some((xs, ss, es, a_soc));
                            break;
                        }
                    }
                    first = false;
                    alpha *= 0.5;
                }
            }

            match accepted {
                Some((xt, st, et, a)) => {
                    for i in 0..self.m {
                        y[i] += a * dir.dy[i];
                    }
                    for j in 0..n {
                        zl[j] += alpha_z * dir.dzl[j];
                        zu[j] += alpha_z * dir.dzu[j];
                    }
                    for k in 0..self.n_slack {
                        vl[k] += alpha_z * dir.dvl[k];
                        vu[k] += alpha_z * dir.dvu[k];
                    }
                    x = xt;
                    s = st;
                    ev = et;
                    if let Some(last) = log.last_mut() {
                        last.step = a;
                    }
                }
                None => {
                    // Feasibility restoration.
                    restorations += 1;
                    debug!("restoration phase at iteration {iter} (theta {theta:.3e})");
                    filter.augment(theta, phi);
                    let (mut xr, mut sr) = (x.clone(), s.clone());
                    match self.restore(&mut xr, &mut sr, mu, theta, &filter) {
                        Ok(()) => {
                            x = xr;
                            s = sr;
                        }
                        Err(()) => {
                            status = SolveStatus::Infeasible;
                            break;
                        }
                    }
                    ev = self.evaluate(&x);
                    for &j in &self.free {
                        if self.xl[j].is_finite() {
                            zl[j] = mu / (x[j] - self.xl[j]);
                        }
                        if self.xu[j].is_finite() {
                            zu[j] = mu / (self.xu[j] - x[j]);
                        }
                    }
                    for (k, &i) in self.slack_row.iter().enumerate() {
                        if self.cl[i].is_finite() {
                            vl[k] = mu / (s[k] - self.cl[i]);
                        }
                        if self.cu[i].is_finite() {
                            vu[k] = mu / (self.cu[i] - s[k]);
                        }
                    }
                    let jr = self.jacobian(&x);
                    y = self.least_squares_multipliers(&ev, &jr, &zl, &zu, &vl, &vu)?;
                    in_restoration_record = true;
                    if restorations > 50 {
                        status = SolveStatus::Infeasible;
                        jac = jr;
                        iter += 1;
                        break;
                    }
                }
            }

            // Keep bound multipliers near the central path.
            for &j in &self.free {
                if self.xl[j].is_finite() {
                    let sl = x[j] - self.xl[j];
                    zl[j] = zl[j].min(KAPPA_SIGMA * mu / sl).max(mu / (KAPPA_SIGMA * sl));
                }
                if self.xu[j].is_finite() {
                    let su = self.xu[j] - x[j];
                    zu[j] = zu[j].min(KAPPA_SIGMA * mu / su).max(mu / (KAPPA_SIGMA * su));
                }
            }
            for (k, &i) in self.slack_row.iter().enumerate() {
                if self.cl[i].is_finite() {
                    let sl = s[k] - self.cl[i];
                    vl[k] = vl[k].min(KAPPA_SIGMA * mu / sl).max(mu / (KAPPA_SIGMA * sl));
                }
                if self.cu[i].is_finite() {
                    let su = self.cu[i] - s[k];
                    vu[k] = vu[k].min(KAPPA_SIGMA * mu / su).max(mu / (KAPPA_SIGMA * su));
                }
            }
            jac = self.jacobian(&x);
            iter += 1;
        }

        let r = self.residual(&ev.c, &s);
        let violation = linf(&r);
        let jty = self.jt_y(&jac, &y);
        let mut dual_inf = 0.0f64;
        for &j in &self.free {
            dual_inf = dual_inf.max((ev.grad[j] + jty[j] - zl[j] + zu[j]).abs());
        }
        let state = IpmState {
            x,
            y,
            z_lower: zl,
            z_upper: zu,
        };
        Ok(self.finish(state, status, iter, ev.f, dual_inf, violation, log, started))
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        state: IpmState,
        status: SolveStatus,
        iterations: usize,
        objective: f64,
        kkt_residual: f64,
        violation: f64,
        log: Vec<IterationRecord>,
        started: Instant,
    ) -> IpmOutcome {
        debug!(
            "barrier solve: {status:?} after {iterations} iterations, f {objective:.8e}, viol {violation:.2e} ({:.2?})",
            started.elapsed()
        );
        IpmOutcome {
            state,
            status,
            iterations,
            objective,
            kkt_residual,
            violation,
            log,
        }
    }

    /// Returns `Some(f_type)` when the trial pair is accepted.
    #[allow(clippy::too_many_arguments)]
    fn acceptable(
        &self,
        filter: &Filter,
        theta: f64,
        phi: f64,
        grad_phi_d: f64,
        alpha: f64,
        theta_t: f64,
        phi_t: f64,
        theta_min: f64,
    ) -> Option<bool> {
        if !filter.is_acceptable(theta_t, phi_t) {
            return None;
        }
        let switching = grad_phi_d < 0.0
            && alpha * (-grad_phi_d).powf(S_PHI) > DELTA_SWITCH * theta.powf(S_THETA);
        if theta <= theta_min && switching {
            if phi_t <= phi + ETA_PHI * alpha * grad_phi_d {
                return Some(true);
            }
            return None;
        }
        if sufficient_progress(theta, phi, theta_t, phi_t) {
            return Some(false);
        }
        None
    }

    fn hessian(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut vals = vec![0.0; self.hess_coord.len()];
        self.problem.hessian_values(x, 1.0, y, &mut vals);
        vals
    }

    /// Assemble and factor the KKT matrix with inertia correction. Returns the
    /// assembled values, the factor and the δw used.
    #[allow(clippy::too_many_arguments)]
    fn factor_kkt(
        &self,
        x: &[f64],
        jac: &[f64],
        hess: &[f64],
        sigma_x: &[f64],
        d_rows: &dyn Fn(f64) -> Vec<f64>,
        delta_w_last: f64,
    ) -> Option<(Vec<f64>, LdlFactor, f64, Vec<f64>)> {
        let nf = self.free.len();
        let na = self.active_rows.len();
        let mut values = vec![0.0; self.n_hess + self.jac_coord.iter().filter(|c| c.is_some()).count()];
        for (k, c) in self.hess_coord.iter().enumerate() {
            if let Some(c) = c {
                values[*c] += hess[k];
            }
        }
        for (k, c) in self.jac_coord.iter().enumerate() {
            if let Some(c) = c {
                values[*c] += jac[k];
            }
        }
        let mut penalty_diag = vec![0.0; nf];
        if self.rho > 0.0 {
            for &j in &self.binaries {
                if let Some(p) = self.free_pos[j] {
                    penalty_diag[p] += self.penalty_curvature(x[j]);
                }
            }
        }
        let mut delta_w = 0.0;
        let mut attempt = 0;
        loop {
            let d = d_rows(delta_w);
            let mut shift = vec![0.0; nf + na];
            for p in 0..nf {
                shift[p] = sigma_x[p] + penalty_diag[p] + delta_w;
            }
            for a in 0..na {
                shift[nf + a] = -d[a];
            }
            let ax = self.symbolic.assemble(&values, &shift);
            let fac = self.symbolic.factorize(&ax);
            if fac.zero() == 0 && fac.positive() == nf && fac.negative() == na {
                return Some((ax, fac, delta_w, d));
            }
            attempt += 1;
            delta_w = if attempt == 1 {
                if delta_w_last == 0.0 {
                    DELTA_W_INIT
                } else {
                    DELTA_W_MIN.max(delta_w_last / 3.0)
                }
            } else if delta_w_last == 0.0 {
                100.0 * delta_w
            } else {
                8.0 * delta_w
            };
            if delta_w > DELTA_W_MAX {
                return None;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn direction(
        &self,
        x: &[f64],
        s: &[f64],
        y: &[f64],
        zl: &[f64],
        zu: &[f64],
        vl: &[f64],
        vu: &[f64],
        ev: &Eval,
        jac: &[f64],
        hess: &[f64],
        mu: f64,
        delta_w_last: f64,
    ) -> Option<(Direction, f64)> {
        let nf = self.free.len();
        let mut sigma_x = vec![0.0; nf];
        for (p, &j) in self.free.iter().enumerate() {
            if self.xl[j].is_finite() {
                sigma_x[p] += zl[j] / (x[j] - self.xl[j]);
            }
            if self.xu[j].is_finite() {
                sigma_x[p] += zu[j] / (self.xu[j] - x[j]);
            }
        }
        let sigma_s: Vec<f64> = self
            .slack_row
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let mut v = 0.0;
                if self.cl[i].is_finite() {
                    v += vl[k] / (s[k] - self.cl[i]);
                }
                if self.cu[i].is_finite() {
                    v += vu[k] / (self.cu[i] - s[k]);
                }
                v
            })
            .collect();
        let d_rows = |dw: f64| -> Vec<f64> {
            self.active_rows
                .iter()
                .map(|&i| match self.row_kind[i] {
                    RowKind::Inequality(k) => 1.0 / (sigma_s[k] + dw) + DELTA_C,
                    _ => DELTA_C,
                })
                .collect()
        };
        let (ax, fac, delta_w, _) = self.factor_kkt(x, jac, hess, &sigma_x, &d_rows, delta_w_last)?;

        let rhs = self.newton_rhs(x, s, y, ev, jac, mu, &sigma_s, delta_w, None);
        let sol = self.symbolic.solve_refined(&fac, &ax, &rhs, REFINEMENT_STEPS);
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some((
            self.recover(x, s, y, zl, zu, vl, vu, mu, &sigma_s, delta_w, &sol),
            delta_w,
        ))
    }

    /// Right-hand side of the reduced system. `soc` replaces the constraint
    /// residual for second-order corrections.
    #[allow(clippy::too_many_arguments)]
    fn newton_rhs(
        &self,
        x: &[f64],
        s: &[f64],
        y: &[f64],
        ev: &Eval,
        jac: &[f64],
        mu: f64,
        sigma_s: &[f64],
        delta_w: f64,
        soc: Option<&[f64]>,
    ) -> Vec<f64> {
        let nf = self.free.len();
        let jty = self.jt_y(jac, y);
        let mut rhs = vec![0.0; nf + self.active_rows.len()];
        for (p, &j) in self.free.iter().enumerate() {
            let mut g = ev.grad[j] + jty[j];
            if self.xl[j].is_finite() {
                g -= mu / (x[j] - self.xl[j]);
            }
            if self.xu[j].is_finite() {
                g += mu / (self.xu[j] - x[j]);
            }
            rhs[p] = -g;
        }
        let resid = self.residual(&ev.c, s);
        for (a, &i) in self.active_rows.iter().enumerate() {
            let rc = soc.map(|v| v[a]).unwrap_or(resid[a]);
            rhs[nf + a] = match self.row_kind[i] {
                RowKind::Inequality(k) => {
                    let rs = self.slack_barrier_grad(s, k, mu) - y[i];
                    -(rc + rs / (sigma_s[k] + delta_w))
                }
                _ => -rc,
            };
        }
        rhs
    }

    fn slack_barrier_grad(&self, s: &[f64], k: usize, mu: f64) -> f64 {
        let i = self.slack_row[k];
        let mut g = 0.0;
        if self.cl[i].is_finite() {
            g -= mu / (s[k] - self.cl[i]);
        }
        if self.cu[i].is_finite() {
            g += mu / (self.cu[i] - s[k]);
        }
        g
    }

    #[allow(clippy::too_many_arguments)]
    fn recover(
        &self,
        x: &[f64],
        s: &[f64],
        y: &[f64],
        zl: &[f64],
        zu: &[f64],
        vl: &[f64],
        vu: &[f64],
        mu: f64,
        sigma_s: &[f64],
        delta_w: f64,
        sol: &[f64],
    ) -> Direction {
        let n = self.n;
        let nf = self.free.len();
        let mut dx = vec![0.0; n];
        for (p, &j) in self.free.iter().enumerate() {
            dx[j] = sol[p];
        }
        let mut dy = vec![0.0; self.m];
        for (a, &i) in self.active_rows.iter().enumerate() {
            dy[i] = sol[nf + a];
        }
        let mut ds = vec![0.0; self.n_slack];
        for (k, &i) in self.slack_row.iter().enumerate() {
            let rs = self.slack_barrier_grad(s, k, mu) - y[i];
            ds[k] = (dy[i] - rs) / (sigma_s[k] + delta_w);
        }
        let mut dzl = vec![0.0; n];
        let mut dzu = vec![0.0; n];
        for &j in &self.free {
            if self.xl[j].is_finite() {
                let sl = x[j] - self.xl[j];
                dzl[j] = mu / sl - zl[j] - zl[j] / sl * dx[j];
            }
            if self.xu[j].is_finite() {
                let su = self.xu[j] - x[j];
                dzu[j] = mu / su - zu[j] + zu[j] / su * dx[j];
            }
        }
        let mut dvl = vec![0.0; self.n_slack];
        let mut dvu = vec![0.0; self.n_slack];
        for (k, &i) in self.slack_row.iter().enumerate() {
            if self.cl[i].is_finite() {
                let sl = s[k] - self.cl[i];
                dvl[k] = mu / sl - vl[k] - vl[k] / sl * ds[k];
            }
            if self.cu[i].is_finite() {
                let su = self.cu[i] - s[k];
                dvu[k] = mu / su - vu[k] + vu[k] / su * ds[k];
            }
        }
        Direction {
            dx,
            ds,
            dy,
            dzl,
            dzu,
            dvl,
            dvu,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn second_order_correction(
        &self,
        x: &[f64],
        s: &[f64],
        y: &[f64],
        zl: &[f64],
        zu: &[f64],
        vl: &[f64],
        vu: &[f64],
        ev: &Eval,
        jac: &[f64],
        hess: &[f64],
        mu: f64,
        delta_w: f64,
        dir: &Direction,
        alpha: f64,
        tau: f64,
        theta: f64,
        phi: f64,
        grad_phi_d: f64,
        theta_min: f64,
        filter: &Filter,
        first_trial: Eval,
    ) -> Option<(Vec<f64>, Vec<f64>, Eval, f64, bool)> {
        let nf = self.free.len();
        let mut sigma_x = vec![0.0; nf];
        for (p, &j) in self.free.iter().enumerate() {
            if self.xl[j].is_finite() {
                sigma_x[p] += zl[j] / (x[j] - self.xl[j]);
            }
            if self.xu[j].is_finite() {
                sigma_x[p] += zu[j] / (self.xu[j] - x[j]);
            }
        }
        let sigma_s: Vec<f64> = self
            .slack_row
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let mut v = 0.0;
                if self.cl[i].is_finite() {
                    v += vl[k] / (s[k] - self.cl[i]);
                }
                if self.cu[i].is_finite() {
                    v += vu[k] / (self.cu[i] - s[k]);
                }
                v
            })
            .collect();
        let d_rows = |dw: f64| -> Vec<f64> {
            self.active_rows
                .iter()
                .map(|&i| match self.row_kind[i] {
                    RowKind::Inequality(k) => 1.0 / (sigma_s[k] + dw) + DELTA_C,
                    _ => DELTA_C,
                })
                .collect()
        };
        // Refactor with the δw of the accepted direction.
        let (ax, fac, dw, _) = self.factor_kkt(x, jac, hess, &sigma_x, &d_rows, delta_w)?;
        let mut c_soc = self.residual(&ev.c, s);
        let st0 = axpy(s, alpha, &dir.ds);
        let mut trial_c = self.residual(&first_trial.c, &st0);
        let mut alpha_soc = alpha;
        let mut theta_old = l1(&trial_c);
        for _ in 0..MAX_SOC {
            for (cs, tc) in c_soc.iter_mut().zip(&trial_c) {
                *cs = alpha_soc * *cs + tc;
            }
            let rhs = self.newton_rhs(x, s, y, ev, jac, mu, &sigma_s, dw, Some(&c_soc));
            let sol = self.symbolic.solve_refined(&fac, &ax, &rhs, REFINEMENT_STEPS);
            if sol.iter().any(|v| !v.is_finite()) {
                return None;
            }
            let d = self.recover(x, s, y, zl, zu, vl, vu, mu, &sigma_s, dw, &sol);
            let mut a = 1.0f64;
            for &j in &self.free {
                let dj = d.dx[j];
                if self.xl[j].is_finite() && dj < 0.0 {
                    a = a.min(-tau * (x[j] - self.xl[j]) / dj);
                }
                if self.xu[j].is_finite() && dj > 0.0 {
                    a = a.min(tau * (self.xu[j] - x[j]) / dj);
                }
            }
            for (k, &i) in self.slack_row.iter().enumerate() {
                let dk = d.ds[k];
                if self.cl[i].is_finite() && dk < 0.0 {
                    a = a.min(-tau * (s[k] - self.cl[i]) / dk);
                }
                if self.cu[i].is_finite() && dk > 0.0 {
                    a = a.min(tau * (self.cu[i] - s[k]) / dk);
                }
            }
            let xt = axpy(x, a, &d.dx);
            let st = axpy(s, a, &d.ds);
            let et = self.evaluate(&xt);
            let rt = self.residual(&et.c, &st);
            let theta_t = l1(&rt);
            let phi_t = self.barrier(et.f, &xt, &st, mu);
            if let Some(f_type) =
                self.acceptable(filter, theta, phi, grad_phi_d, alpha, theta_t, phi_t, theta_min)
            {
                return Some((xt, st, et, alpha, f_type));
            }
            if theta_t > KAPPA_SOC * theta_old {
                return None;
            }
            theta_old = theta_t;
            alpha_soc = a;
            trial_c = rt;
        }
        None
    }

    /// Minimize `½‖r(x, s)‖² + ½ζ‖D(x − x_R)‖²` plus a bound barrier until the
    /// violation has dropped enough for the filter to accept the point.
    fn restore(&self, x: &mut Vec<f64>, s: &mut Vec<f64>, mu: f64, theta_start: f64, filter: &Filter) -> Result<(), ()> {
        let nf = self.free.len();
        let na = self.active_rows.len();
        let x_ref = x.clone();
        let s_ref = s.clone();
        let dr: Vec<f64> = self.free.iter().map(|&j| 1.0f64.min(1.0 / x_ref[j].abs().max(1e-300))).collect();
        let mut ev = self.evaluate(x);
        let mut r = self.residual(&ev.c, s);
        let zeta = mu.sqrt().min(1e-2 * linf(&r)).max(1e-12);
        // A barrier weight on the order of the residual would let centering
        // outweigh feasibility once the residual is small.
        let mu_r = mu.min(1e-2 * linf(&r).powi(2)).max(1e-16);
        let merit = |x: &[f64], s: &[f64], r: &[f64]| -> f64 {
            let mut v = 0.5 * r.iter().map(|a| a * a).sum::<f64>();
            for (p, &j) in self.free.iter().enumerate() {
                let d = dr[p] * (x[j] - x_ref[j]);
                v += 0.5 * zeta * d * d;
                if self.xl[j].is_finite() {
                    v -= mu_r * (x[j] - self.xl[j]).ln();
                }
                if self.xu[j].is_finite() {
                    v -= mu_r * (self.xu[j] - x[j]).ln();
                }
            }
            for (k, &i) in self.slack_row.iter().enumerate() {
                let d = s[k] - s_ref[k];
                v += 0.5 * zeta * d * d;
                if self.cl[i].is_finite() {
                    v -= mu_r * (s[k] - self.cl[i]).ln();
                }
                if self.cu[i].is_finite() {
                    v -= mu_r * (self.cu[i] - s[k]).ln();
                }
            }
            if v.is_nan() {
                f64::INFINITY
            } else {
                v
            }
        };
        let zero_hess = vec![0.0; self.hess_coord.len()];
        let mut best_theta = f64::INFINITY;
        let mut last_progress = 0;
        for it in 0..MAX_RESTORATION_ITERS {
            let theta = l1(&r);
            trace!("restoration {it}: theta {theta:.3e} linf {:.3e}", linf(&r));
            if theta < 0.99 * best_theta {
                best_theta = theta;
                last_progress = it;
            } else if it - last_progress > RESTORATION_STALL {
                return Err(());
            }
            if theta <= 0.9 * theta_start || linf(&r) <= 0.1 * self.opts.feasibility_tol {
                let phi = self.barrier(ev.f, x, s, mu);
                if filter.is_acceptable(theta, phi) || linf(&r) <= 0.1 * self.opts.feasibility_tol {
                    trace!("restoration succeeded after {it} iterations");
                    return Ok(());
                }
            }
            let jac = self.jacobian(x);
            let mut hx = vec![0.0; nf];
            let mut gx = vec![0.0; nf];
            for (p, &j) in self.free.iter().enumerate() {
                hx[p] = zeta * dr[p] * dr[p];
                gx[p] = zeta * dr[p] * dr[p] * (x[j] - x_ref[j]);
                if self.xl[j].is_finite() {
                    let sl = x[j] - self.xl[j];
                    hx[p] += mu_r / (sl * sl);
                    gx[p] -= mu_r / sl;
                }
                if self.xu[j].is_finite() {
                    let su = self.xu[j] - x[j];
                    hx[p] += mu_r / (su * su);
                    gx[p] += mu_r / su;
                }
            }
            let mut hs = vec![0.0; self.n_slack];
            let mut gs = vec![0.0; self.n_slack];
            for (k, &i) in self.slack_row.iter().enumerate() {
                hs[k] = zeta;
                gs[k] = zeta * (s[k] - s_ref[k]);
                if self.cl[i].is_finite() {
                    let sl = s[k] - self.cl[i];
                    hs[k] += mu_r / (sl * sl);
                    gs[k] -= mu_r / sl;
                }
                if self.cu[i].is_finite() {
                    let su = self.cu[i] - s[k];
                    hs[k] += mu_r / (su * su);
                    gs[k] += mu_r / su;
                }
            }
            let d_rows = |_dw: f64| -> Vec<f64> {
                self.active_rows
                    .iter()
                    .map(|&i| match self.row_kind[i] {
                        RowKind::Inequality(k) => 1.0 / hs[k] + 1.0,
                        _ => 1.0,
                    })
                    .collect()
            };
            let (ax, fac, _, _) = match self.factor_kkt_plain(&jac, &zero_hess, &hx, &d_rows) {
                Some(v) => v,
                None => return Err(()),
            };
            let mut rhs = vec![0.0; nf + na];
            for p in 0..nf {
                rhs[p] = -gx[p];
            }
            for (a, &i) in self.active_rows.iter().enumerate() {
                rhs[nf + a] = match self.row_kind[i] {
                    RowKind::Inequality(k) => -(r[a] + gs[k] / hs[k]),
                    _ => -r[a],
                };
            }
            let sol = self.symbolic.solve_refined(&fac, &ax, &rhs, REFINEMENT_STEPS);
            if sol.iter().any(|v| !v.is_finite()) {
                return Err(());
            }
            let mut dx = vec![0.0; self.n];
            for (p, &j) in self.free.iter().enumerate() {
                dx[j] = sol[p];
            }
            let mut ds = vec![0.0; self.n_slack];
            for (k, &i) in self.slack_row.iter().enumerate() {
                let a = self.active_rows.binary_search(&i).expect("slack row is active");
                ds[k] = (sol[nf + a] - gs[k]) / hs[k];
            }
            let tau = 0.99;
            let mut amax = 1.0f64;
            for &j in &self.free {
                if self.xl[j].is_finite() && dx[j] < 0.0 {
                    amax = amax.min(-tau * (x[j] - self.xl[j]) / dx[j]);
                }
                if self.xu[j].is_finite() && dx[j] > 0.0 {
                    amax = amax.min(tau * (self.xu[j] - x[j]) / dx[j]);
                }
            }
            for (k, &i) in self.slack_row.iter().enumerate() {
                if self.cl[i].is_finite() && ds[k] < 0.0 {
                    amax = amax.min(-tau * (s[k] - self.cl[i]) / ds[k]);
                }
                if self.cu[i].is_finite() && ds[k] > 0.0 {
                    amax = amax.min(tau * (self.cu[i] - s[k]) / ds[k]);
                }
            }
            let m0 = merit(x, s, &r);
            let mut a = amax;
            let mut moved = false;
            while a > 1e-12 {
                let xt = axpy(x, a, &dx);
                let st = axpy(s, a, &ds);
                let et = self.evaluate(&xt);
                let rt = self.residual(&et.c, &st);
                let mt = merit(&xt, &st, &rt);
                if mt <= m0 - 1e-8 * a * m0.abs().max(1e-12) || mt < m0 {
                    *x = xt;
                    *s = st;
                    ev = et;
                    r = rt;
                    moved = true;
                    break;
                }
                a *= 0.5;
            }
            if !moved {
                return Err(());
            }
        }
        Err(())
    }

    /// Factorization without inertia correction for the restoration system,
    /// which is quasi-definite by construction.
    fn factor_kkt_plain(
        &self,
        jac: &[f64],
        hess: &[f64],
        diag_x: &[f64],
        d_rows: &dyn Fn(f64) -> Vec<f64>,
    ) -> Option<(Vec<f64>, LdlFactor, f64, Vec<f64>)> {
        let nf = self.free.len();
        let na = self.active_rows.len();
        let mut values = vec![0.0; self.n_hess + self.jac_coord.iter().filter(|c| c.is_some()).count()];
        for (k, c) in self.hess_coord.iter().enumerate() {
            if let Some(c) = c {
                values[*c] += hess[k];
            }
        }
        for (k, c) in self.jac_coord.iter().enumerate() {
            if let Some(c) = c {
                values[*c] += jac[k];
            }
        }
        let d = d_rows(0.0);
        let mut shift = vec![0.0; nf + na];
        shift[..nf].copy_from_slice(diag_x);
        for a in 0..na {
            shift[nf + a] = -d[a];
        }
        let ax = self.symbolic.assemble(&values, &shift);
        let fac = self.symbolic.factorize(&ax);
        if fac.zero() > 0 {
            return None;
        }
        Some((ax, fac, 0.0, d))
    }

    /// Least-squares estimate of the constraint multipliers from the
    /// stationarity condition; falls back to zero when it is too large.
    fn least_squares_multipliers(
        &self,
        ev: &Eval,
        jac: &[f64],
        zl: &[f64],
        zu: &[f64],
        vl: &[f64],
        vu: &[f64],
    ) -> Result<Vec<f64>, NlpError> {
        let nf = self.free.len();
        let na = self.active_rows.len();
        let mut y = vec![0.0; self.m];
        if na == 0 {
            return Ok(y);
        }
        let diag = vec![1.0; nf];
        let zero_hess = vec![0.0; self.hess_coord.len()];
        let d_rows = |_dw: f64| -> Vec<f64> {
            self.active_rows
                .iter()
                .map(|&i| match self.row_kind[i] {
                    RowKind::Inequality(_) => 1.0,
                    _ => DELTA_C,
                })
                .collect()
        };
        let Some((ax, fac, _, _)) = self.factor_kkt_plain(jac, &zero_hess, &diag, &d_rows) else {
            return Ok(y);
        };
        let mut rhs = vec![0.0; nf + na];
        for (p, &j) in self.free.iter().enumerate() {
            rhs[p] = -(ev.grad[j] - zl[j] + zu[j]);
        }
        for (a, &i) in self.active_rows.iter().enumerate() {
            if let RowKind::Inequality(k) = self.row_kind[i] {
                // Slack stationarity -y - vl + vu = 0 as a soft target.
                rhs[nf + a] = vl[k] - vu[k];
            }
        }
        let sol = self.symbolic.solve_refined(&fac, &ax, &rhs, REFINEMENT_STEPS);
        let big = sol[nf..].iter().any(|v| !v.is_finite() || v.abs() > 1e3);
        if !big {
            for (a, &i) in self.active_rows.iter().enumerate() {
                y[i] = sol[nf + a];
            }
        }
        Ok(y)
    }
}

fn axpy(x: &[f64], a: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(xi, di)| xi + a * di).collect()
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|a| a.abs()).sum()
}

fn linf(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, a| m.max(a.abs()))
}
