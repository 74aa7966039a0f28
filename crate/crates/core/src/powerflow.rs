//! AC power flow oracle: nodal mismatch, Newton-Raphson with reactive-limit
//! switching, branch flows, and a continuation power flow that traces the
//! P-V curve up to the first voltage-security limit.

use std::fmt::Write as _;

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};
use log::{debug, trace};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::capability::{limit_with_derivatives, q_envelope, CapabilityError, LimitSide};
use crate::network::{AdmittanceMatrix, NetworkCase, NodalDemand};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PointClass {
    /// Current operation point.
    Cop,
    /// Security limit point.
    Slp,
}

impl PointClass {
    pub fn index(self) -> usize {
        match self {
            PointClass::Cop => 0,
            PointClass::Slp => 1,
        }
    }

    pub const BOTH: [PointClass; 2] = [PointClass::Cop, PointClass::Slp];

    pub fn as_str(self) -> &'static str {
        match self {
            PointClass::Cop => "COP",
            PointClass::Slp => "SLP",
        }
    }
}

/// A complete power-flow state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub pg: Vec<f64>,
    pub qg: Vec<f64>,
    pub pw: Vec<f64>,
    pub qw: Vec<f64>,
    pub ph: Vec<f64>,
    pub qh: Vec<f64>,
    pub point_class: PointClass,
    pub hour: usize,
}

/// Injections and setpoints handed to the power flow.
#[derive(Debug, Clone, PartialEq)]
pub struct Dispatch {
    /// Active output per generator. The slack entry is only a starting value.
    pub pg: Vec<f64>,
    /// Voltage setpoint per generator.
    pub v_set: Vec<f64>,
    pub pw: Vec<f64>,
    pub qw: Vec<f64>,
    pub ph: Vec<f64>,
    pub qh: Vec<f64>,
    pub demand: NodalDemand,
    pub hour: usize,
}

impl Dispatch {
    /// Base-case generation and demand, no wind and no electrolyzer load.
    pub fn base_case(case: &NetworkCase) -> Dispatch {
        Dispatch {
            pg: case.generators.iter().map(|g| g.pg_init).collect(),
            v_set: case.generators.iter().map(|g| g.v_setpoint).collect(),
            pw: vec![0.0; case.wind_farms.len()],
            qw: vec![0.0; case.wind_farms.len()],
            ph: vec![0.0; case.electrolyzers.len()],
            qh: vec![0.0; case.electrolyzers.len()],
            demand: NodalDemand {
                p: case.buses.iter().map(|b| b.base_demand_p).collect(),
                q: case.buses.iter().map(|b| b.base_demand_q).collect(),
            },
            hour: 0,
        }
    }
}

/// Direction in which demand and generation grow with the loading parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Growth {
    pub kp: Vec<f64>,
    pub kq: Vec<f64>,
    /// Per generator; the slack entry is ignored.
    pub kg: Vec<f64>,
}

impl Growth {
    /// Factors from the case, with the slack generator absorbing the balance.
    pub fn from_case(case: &NetworkCase) -> Growth {
        Growth {
            kp: case.buses.iter().map(|b| b.kp).collect(),
            kq: case.buses.iter().map(|b| b.kq).collect(),
            kg: case
                .generators
                .iter()
                .map(|g| if g.is_slack { 0.0 } else { case.buses[g.bus].kg })
                .collect(),
        }
    }

    pub fn none(case: &NetworkCase) -> Growth {
        Growth {
            kp: vec![0.0; case.buses.len()],
            kq: vec![0.0; case.buses.len()],
            kg: vec![0.0; case.generators.len()],
        }
    }

    fn demand_is_static(&self) -> bool {
        self.kp.iter().chain(&self.kq).all(|&k| k == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PowerFlowError {
    #[error("power flow did not converge after {iterations} iterations (max mismatch {residual:.3e} pu)")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("power-flow Jacobian is singular")]
    Singular,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Capability(#[from] CapabilityError),
    #[error("the starting point (lambda = 0) is not solvable: {0}")]
    InfeasibleStart(String),
}

// ---------------------------------------------------------------------------
// Mismatch

/// Net scheduled injections per bus (`PG + PW - PD - PH`, `QG + QW - QD - QH`).
fn scheduled_injections(case: &NetworkCase, point: &OperatingPoint, demand: &NodalDemand) -> (Vec<f64>, Vec<f64>) {
    let nb = case.buses.len();
    let mut p: Vec<f64> = (0..nb).map(|b| -demand.p[b]).collect();
    let mut q: Vec<f64> = (0..nb).map(|b| -demand.q[b]).collect();
    for (k, g) in case.generators.iter().enumerate() {
        p[g.bus] += point.pg[k];
        q[g.bus] += point.qg[k];
    }
    for (k, w) in case.wind_farms.iter().enumerate() {
        p[w.bus] += point.pw[k];
        q[w.bus] += point.qw[k];
    }
    for (k, e) in case.electrolyzers.iter().enumerate() {
        p[e.bus] -= point.ph[k];
        q[e.bus] -= point.qh[k];
    }
    (p, q)
}

/// Nodal residuals `ΔP_b = PG + PW − PD − PH − Σ_k V_b V_k Y_bk cos(θ_b − θ_k − γ_bk)`
/// and the analogous `ΔQ_b` with `sin`, evaluated in polar admittance form.
pub fn mismatch(
    case: &NetworkCase,
    y: &AdmittanceMatrix,
    point: &OperatingPoint,
    demand: &NodalDemand,
) -> (Vec<f64>, Vec<f64>) {
    let (mut dp, mut dq) = scheduled_injections(case, point, demand);
    for b in 0..case.buses.len() {
        for (k, ybk) in y.row(b) {
            let mag = ybk.norm();
            let gamma = ybk.arg();
            let angle = point.theta[b] - point.theta[k] - gamma;
            let vv = point.v[b] * point.v[k] * mag;
            dp[b] -= vv * angle.cos();
            dq[b] -= vv * angle.sin();
        }
    }
    (dp, dq)
}

pub fn max_mismatch(case: &NetworkCase, y: &AdmittanceMatrix, point: &OperatingPoint, demand: &NodalDemand) -> f64 {
    let (dp, dq) = mismatch(case, y, point, demand);
    dp.iter().chain(&dq).fold(0.0f64, |m, v| m.max(v.abs()))
}

// ---------------------------------------------------------------------------
// Branch flows

/// Complex power entering the branch at the from and to ends.
pub fn branch_flows(case: &NetworkCase, point: &OperatingPoint, branch: usize) -> (Complex64, Complex64) {
    let br = &case.branches[branch];
    let (yff, yft, ytf, ytt) = br.two_port();
    let vf = Complex64::from_polar(point.v[br.from_bus], point.theta[br.from_bus]);
    let vt = Complex64::from_polar(point.v[br.to_bus], point.theta[br.to_bus]);
    let i_f = yff * vf + yft * vt;
    let i_t = ytf * vf + ytt * vt;
    (vf * i_f.conj(), vt * i_t.conj())
}

/// The larger of the two end apparent flows.
pub fn branch_apparent_flow(case: &NetworkCase, point: &OperatingPoint, branch: usize) -> f64 {
    let (sf, st) = branch_flows(case, point, branch);
    sf.norm().max(st.norm())
}

// ---------------------------------------------------------------------------
// Reduced power-flow system

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GenMode {
    /// Holds its voltage setpoint.
    Regulating,
    AtUpper,
    AtLower,
}

/// Injections and their derivatives in rectangular admittance form.
fn injections(y: &AdmittanceMatrix, v: &[f64], th: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let nb = v.len();
    let mut p = vec![0.0; nb];
    let mut q = vec![0.0; nb];
    for b in 0..nb {
        for (k, ybk) in y.row(b) {
            let (s, c) = (th[b] - th[k]).sin_cos();
            let vv = v[b] * v[k];
            p[b] += vv * (ybk.re * c + ybk.im * s);
            q[b] += vv * (ybk.re * s - ybk.im * c);
        }
    }
    (p, q)
}

struct InjectionDerivative {
    b: usize,
    k: usize,
    dp_dth: f64,
    dp_dv: f64,
    dq_dth: f64,
    dq_dv: f64,
}

fn injection_jacobian(y: &AdmittanceMatrix, v: &[f64], th: &[f64], p: &[f64], q: &[f64]) -> Vec<InjectionDerivative> {
    let mut out = Vec::with_capacity(y.nnz());
    for b in 0..v.len() {
        for (k, ybk) in y.row(b) {
            let (g, bb) = (ybk.re, ybk.im);
            if k == b {
                out.push(InjectionDerivative {
                    b,
                    k,
                    dp_dth: -q[b] - bb * v[b] * v[b],
                    dp_dv: p[b] / v[b] + g * v[b],
                    dq_dth: p[b] - g * v[b] * v[b],
                    dq_dv: q[b] / v[b] - bb * v[b],
                });
            } else {
                let (s, c) = (th[b] - th[k]).sin_cos();
                out.push(InjectionDerivative {
                    b,
                    k,
                    dp_dth: v[b] * v[k] * (g * s - bb * c),
                    dp_dv: v[b] * (g * c + bb * s),
                    dq_dth: -v[b] * v[k] * (g * c + bb * s),
                    dq_dv: v[b] * (g * s - bb * c),
                });
            }
        }
    }
    out
}

struct PfSystem<'a> {
    case: &'a NetworkCase,
    y: &'a AdmittanceMatrix,
    d: &'a Dispatch,
    growth: &'a Growth,
    gen_at_bus: Vec<Option<usize>>,
    slack_bus: usize,
    slack_gen: usize,
    modes: Vec<GenMode>,
    th_var: Vec<Option<usize>>,
    v_var: Vec<Option<usize>>,
    n: usize,
    wind_p: Vec<f64>,
    wind_q: Vec<f64>,
    h2_p: Vec<f64>,
    h2_q: Vec<f64>,
}

struct Evaluation {
    f: Vec<f64>,
    p: Vec<f64>,
    q: Vec<f64>,
}

impl<'a> PfSystem<'a> {
    fn new(
        case: &'a NetworkCase,
        y: &'a AdmittanceMatrix,
        d: &'a Dispatch,
        growth: &'a Growth,
        modes: Vec<GenMode>,
    ) -> PfSystem<'a> {
        let nb = case.buses.len();
        let gen_at_bus = case.generator_at_bus();
        let slack_gen = case.slack_generator();
        let slack_bus = case.generators[slack_gen].bus;
        let mut wind_p = vec![0.0; nb];
        let mut wind_q = vec![0.0; nb];
        for (k, w) in case.wind_farms.iter().enumerate() {
            wind_p[w.bus] += d.pw[k];
            wind_q[w.bus] += d.qw[k];
        }
        let mut h2_p = vec![0.0; nb];
        let mut h2_q = vec![0.0; nb];
        for (k, e) in case.electrolyzers.iter().enumerate() {
            h2_p[e.bus] += d.ph[k];
            h2_q[e.bus] += d.qh[k];
        }
        let mut sys = PfSystem {
            case,
            y,
            d,
            growth,
            gen_at_bus,
            slack_bus,
            slack_gen,
            modes,
            th_var: vec![None; nb],
            v_var: vec![None; nb],
            n: 0,
            wind_p,
            wind_q,
            h2_p,
            h2_q,
        };
        sys.index();
        sys
    }

    fn index(&mut self) {
        let mut n = 0;
        for b in 0..self.case.buses.len() {
            self.th_var[b] = None;
            self.v_var[b] = None;
            if b != self.slack_bus {
                self.th_var[b] = Some(n);
                n += 1;
            }
            let regulated = matches!(self.gen_at_bus[b], Some(g) if self.modes[g] == GenMode::Regulating);
            if !regulated {
                self.v_var[b] = Some(n);
                n += 1;
            }
        }
        self.n = n;
    }

    fn set_mode(&mut self, g: usize, mode: GenMode) {
        self.modes[g] = mode;
        self.index();
    }

    fn gather(&self, v: &[f64], th: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n];
        for b in 0..v.len() {
            if let Some(i) = self.th_var[b] {
                x[i] = th[b];
            }
            if let Some(i) = self.v_var[b] {
                x[i] = v[b];
            }
        }
        x
    }

    fn scatter(&self, x: &[f64], v: &mut [f64], th: &mut [f64]) {
        for b in 0..v.len() {
            if let Some(i) = self.th_var[b] {
                th[b] = x[i];
            }
            if let Some(i) = self.v_var[b] {
                v[b] = x[i];
            }
        }
    }

    /// Fill fixed voltages and the slack angle.
    fn fixed_state(&self, v: &mut [f64], th: &mut [f64]) {
        th[self.slack_bus] = 0.0;
        for (g, gen) in self.case.generators.iter().enumerate() {
            if self.modes[g] == GenMode::Regulating {
                v[gen.bus] = self.d.v_set[g];
            }
        }
    }

    fn pd(&self, b: usize, lambda: f64) -> f64 {
        (1.0 + self.growth.kp[b] * lambda) * self.d.demand.p[b]
    }

    fn qd(&self, b: usize, lambda: f64) -> f64 {
        (1.0 + self.growth.kq[b] * lambda) * self.d.demand.q[b]
    }

    /// Scheduled output and its λ-derivative of a non-slack generator.
    fn pg_sched(&self, g: usize, lambda: f64) -> (f64, f64) {
        let base = self.d.pg[g];
        let cap = self.case.generators[g].pg_max;
        let k = self.growth.kg[g];
        if base >= cap {
            return (base, 0.0);
        }
        let scaled = (1.0 + k * lambda) * base;
        if scaled >= cap {
            (cap, 0.0)
        } else {
            (scaled, k * base)
        }
    }

    fn slack_pg(&self, p_inj: f64, lambda: f64) -> f64 {
        let s = self.slack_bus;
        p_inj - self.wind_p[s] + self.pd(s, lambda) + self.h2_p[s]
    }

    fn generator_pg(&self, g: usize, p: &[f64], lambda: f64) -> f64 {
        if g == self.slack_gen {
            self.slack_pg(p[self.slack_bus], lambda)
        } else {
            self.pg_sched(g, lambda).0
        }
    }

    fn generator_qg(&self, g: usize, q: &[f64], lambda: f64) -> f64 {
        let b = self.case.generators[g].bus;
        q[b] - self.wind_q[b] + self.qd(b, lambda) + self.h2_q[b]
    }

    fn evaluate(&self, v: &[f64], th: &[f64], lambda: f64) -> Result<Evaluation, PowerFlowError> {
        let (p, q) = injections(self.y, v, th);
        let mut f = vec![0.0; self.n];
        for b in 0..v.len() {
            if let Some(i) = self.th_var[b] {
                let mut sched = self.wind_p[b] - self.pd(b, lambda) - self.h2_p[b];
                if let Some(g) = self.gen_at_bus[b] {
                    sched += self.pg_sched(g, lambda).0;
                }
                f[i] = p[b] - sched;
            }
            if let Some(i) = self.v_var[b] {
                let mut sched = self.wind_q[b] - self.qd(b, lambda) - self.h2_q[b];
                if let Some(g) = self.gen_at_bus[b] {
                    let side = match self.modes[g] {
                        GenMode::AtUpper => LimitSide::Upper,
                        GenMode::AtLower => LimitSide::Lower,
                        GenMode::Regulating => unreachable!("regulated bus has no Q row"),
                    };
                    let pg = self.generator_pg(g, &p, lambda);
                    sched += limit_with_derivatives(pg, v[b], &self.case.generators[g], side)?.q;
                }
                f[i] = q[b] - sched;
            }
        }
        Ok(Evaluation { f, p, q })
    }

    /// Jacobian in triplets over the reduced variables, plus `∂F/∂λ`.
    fn jacobian(
        &self,
        v: &[f64],
        th: &[f64],
        lambda: f64,
        ev: &Evaluation,
    ) -> Result<(Vec<(usize, usize, f64)>, Vec<f64>), PowerFlowError> {
        let nb = v.len();
        let derivs = injection_jacobian(self.y, v, th, &ev.p, &ev.q);
        let mut trip = Vec::with_capacity(4 * derivs.len());
        let mut dlam = vec![0.0; self.n];
        // Limit data for held machines: (row, dq/dpg, dq/dv).
        let mut held: Vec<Option<(f64, f64)>> = vec![None; nb];
        for b in 0..nb {
            if let (Some(_), Some(g)) = (self.v_var[b], self.gen_at_bus[b]) {
                let side = match self.modes[g] {
                    GenMode::AtUpper => LimitSide::Upper,
                    _ => LimitSide::Lower,
                };
                let pg = self.generator_pg(g, &ev.p, lambda);
                let lim = limit_with_derivatives(pg, v[b], &self.case.generators[g], side)?;
                held[b] = Some((lim.d_pg, lim.d_v));
            }
        }
        let slack = self.slack_bus;
        let slack_held = held[slack];
        for d in &derivs {
            let b = d.b;
            if let Some(r) = self.th_var[b] {
                if let Some(c) = self.th_var[d.k] {
                    trip.push((r, c, d.dp_dth));
                }
                if let Some(c) = self.v_var[d.k] {
                    trip.push((r, c, d.dp_dv));
                }
            }
            if let Some(r) = self.v_var[b] {
                if let Some(c) = self.th_var[d.k] {
                    trip.push((r, c, d.dq_dth));
                }
                if let Some(c) = self.v_var[d.k] {
                    trip.push((r, c, d.dq_dv));
                }
            }
            // The held slack machine's limit depends on its own active output,
            // which is the slack-bus active injection.
            if b == slack {
                if let (Some(r), Some((dq_dpg, _))) = (self.v_var[slack], slack_held) {
                    if let Some(c) = self.th_var[d.k] {
                        trip.push((r, c, -dq_dpg * d.dp_dth));
                    }
                    if let Some(c) = self.v_var[d.k] {
                        trip.push((r, c, -dq_dpg * d.dp_dv));
                    }
                }
            }
        }
        for b in 0..nb {
            if let Some(r) = self.th_var[b] {
                let mut s = self.growth.kp[b] * self.d.demand.p[b];
                if let Some(g) = self.gen_at_bus[b] {
                    s -= self.pg_sched(g, lambda).1;
                }
                dlam[r] = s;
            }
            if let Some(r) = self.v_var[b] {
                let mut s = self.growth.kq[b] * self.d.demand.q[b];
                if let (Some(g), Some((dq_dpg, dq_dv))) = (self.gen_at_bus[b], held[b]) {
                    trip.push((r, r_v(self, b), -dq_dv));
                    let dpg_dlam = if g == self.slack_gen {
                        self.growth.kp[b] * self.d.demand.p[b]
                    } else {
                        self.pg_sched(g, lambda).1
                    };
                    s -= dq_dpg * dpg_dlam;
                }
                dlam[r] = s;
            }
        }
        Ok((trip, dlam))
    }
}

fn r_v(sys: &PfSystem<'_>, b: usize) -> usize {
    sys.v_var[b].expect("held bus has a voltage variable")
}

fn solve_sparse(n: usize, trip: &[(usize, usize, f64)], rhs: &[f64]) -> Result<Vec<f64>, PowerFlowError> {
    let mut sorted: Vec<(usize, usize, f64)> = trip.to_vec();
    sorted.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
    let mut merged: Vec<Triplet<usize, usize, f64>> = Vec::with_capacity(sorted.len());
    for (r, c, v) in sorted {
        match merged.last_mut() {
            Some(t) if t.row == r && t.col == c => t.val += v,
            _ => merged.push(Triplet::new(r, c, v)),
        }
    }
    let a = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &merged)
        .map_err(|e| PowerFlowError::Dimension(format!("{e:?}")))?;
    let lu = a.sp_lu().map_err(|_| PowerFlowError::Singular)?;
    let mut b = Mat::<f64>::zeros(n, 1);
    for i in 0..n {
        b[(i, 0)] = rhs[i];
    }
    let x = lu.solve(&b);
    let out: Vec<f64> = (0..n).map(|i| x[(i, 0)]).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(PowerFlowError::Singular);
    }
    // A residual check catches numerically singular factors.
    let mut r = rhs.to_vec();
    for t in &merged {
        r[t.row] -= t.val * out[t.col];
    }
    let scale = rhs.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if r.iter().any(|v| v.abs() > 1e-6 * scale) {
        return Err(PowerFlowError::Singular);
    }
    Ok(out)
}

fn linf(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, a| m.max(a.abs()))
}

// ---------------------------------------------------------------------------
// Newton-Raphson

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub enforce_q_limits: bool,
    /// Width of the band around a reactive limit inside which no switch occurs.
    pub hysteresis: f64,
    /// Starting voltages and angles; flat start when absent.
    pub start: Option<(Vec<f64>, Vec<f64>)>,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 30,
            enforce_q_limits: true,
            hysteresis: 1e-9,
            start: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowResult {
    pub point: OperatingPoint,
    pub iterations: usize,
    pub max_mismatch: f64,
    pub modes: Vec<GenMode>,
}

fn newton_inner(
    sys: &PfSystem<'_>,
    v: &mut [f64],
    th: &mut [f64],
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<usize, PowerFlowError> {
    sys.fixed_state(v, th);
    let mut x = sys.gather(v, th);
    let mut last = f64::INFINITY;
    for it in 0..=max_iter {
        sys.scatter(&x, v, th);
        let ev = sys.evaluate(v, th, lambda)?;
        let res = linf(&ev.f);
        trace!("newton it {it}: residual {res:.3e}");
        if res < tol {
            return Ok(it);
        }
        if !res.is_finite() || it == max_iter || (it > 5 && res > 1e3 * last.max(1.0)) {
            return Err(PowerFlowError::NonConvergence {
                iterations: it,
                residual: res,
            });
        }
        last = res;
        let (trip, _) = sys.jacobian(v, th, lambda, &ev)?;
        let rhs: Vec<f64> = ev.f.iter().map(|f| -f).collect();
        let dx = solve_sparse(sys.n, &trip, &rhs)?;
        for i in 0..x.len() {
            x[i] += dx[i];
        }
        for b in 0..v.len() {
            if let Some(i) = sys.v_var[b] {
                if x[i] <= 0.0 {
                    return Err(PowerFlowError::NonConvergence {
                        iterations: it + 1,
                        residual: res,
                    });
                }
            }
        }
    }
    unreachable!()
}

fn build_point(sys: &PfSystem<'_>, v: &[f64], th: &[f64], lambda: f64, class: PointClass) -> OperatingPoint {
    let (p, q) = injections(sys.y, v, th);
    let case = sys.case;
    let d = sys.d;
    let pg = (0..case.generators.len())
        .map(|g| sys.generator_pg(g, &p, lambda))
        .collect();
    let qg = (0..case.generators.len())
        .map(|g| sys.generator_qg(g, &q, lambda))
        .collect();
    OperatingPoint {
        v: v.to_vec(),
        theta: th.to_vec(),
        pg,
        qg,
        pw: d.pw.clone(),
        qw: d.qw.clone(),
        ph: d.ph.clone(),
        qh: d.qh.clone(),
        point_class: class,
        hour: d.hour,
    }
}

/// Reactive-limit violations of regulating machines and releases of held
/// ones. Returns the new mode for every machine that should change.
fn limit_changes(sys: &PfSystem<'_>, v: &[f64], p: &[f64], q: &[f64], lambda: f64, band: f64, release: bool) -> Result<Vec<(usize, GenMode)>, PowerFlowError> {
    let mut out = Vec::new();
    for (g, gen) in sys.case.generators.iter().enumerate() {
        let b = gen.bus;
        match sys.modes[g] {
            GenMode::Regulating => {
                let pg = sys.generator_pg(g, p, lambda);
                let qg = sys.generator_qg(g, q, lambda);
                let env = q_envelope(pg, v[b], gen)?;
                if qg > env.q_max + band {
                    out.push((g, GenMode::AtUpper));
                } else if qg < env.q_min - band {
                    out.push((g, GenMode::AtLower));
                }
            }
            GenMode::AtUpper if release && v[b] > sys.d.v_set[g] + band => out.push((g, GenMode::Regulating)),
            GenMode::AtLower if release && v[b] < sys.d.v_set[g] - band => out.push((g, GenMode::Regulating)),
            _ => {}
        }
    }
    Ok(out)
}

/// Solve the power flow for a fixed dispatch.
pub fn newton_solve(
    case: &NetworkCase,
    y: &AdmittanceMatrix,
    dispatch: &Dispatch,
    opts: &PowerFlowOptions,
) -> Result<PowerFlowResult, PowerFlowError> {
    let growth = Growth::none(case);
    let modes = vec![GenMode::Regulating; case.generators.len()];
    solve_with_modes(case, y, dispatch, &growth, 0.0, modes, opts, PointClass::Cop)
}

#[allow(clippy::too_many_arguments)]
fn solve_with_modes(
    case: &NetworkCase,
    y: &AdmittanceMatrix,
    dispatch: &Dispatch,
    growth: &Growth,
    lambda: f64,
    modes: Vec<GenMode>,
    opts: &PowerFlowOptions,
    class: PointClass,
) -> Result<PowerFlowResult, PowerFlowError> {
    let nb = case.buses.len();
    check_dims(case, dispatch)?;
    let (mut v, mut th) = match &opts.start {
        Some((v0, t0)) if v0.len() == nb && t0.len() == nb => (v0.clone(), t0.clone()),
        _ => (vec![1.0; nb], vec![0.0; nb]),
    };
    let mut sys = PfSystem::new(case, y, dispatch, growth, modes);
    let mut total = 0;
    let mut seen = std::collections::HashSet::new();
    for round in 0..(2 * case.generators.len() + 2) {
        total += newton_inner(&sys, &mut v, &mut th, lambda, opts.tolerance, opts.max_iterations)?;
        if !opts.enforce_q_limits {
            break;
        }
        let (p, q) = injections(y, &v, &th);
        // Releases are only considered once no new violation remains.
        let mut changes = limit_changes(&sys, &v, &p, &q, lambda, opts.hysteresis, false)?;
        if changes.is_empty() {
            changes = limit_changes(&sys, &v, &p, &q, lambda, opts.hysteresis, true)?;
        }
        if changes.is_empty() {
            break;
        }
        if !seen.insert(sys.modes.clone()) {
            debug!("reactive-limit switching cycles; keeping the current assignment");
            break;
        }
        for (g, mode) in changes {
            debug!("round {round}: generator {g} -> {mode:?}");
            sys.set_mode(g, mode);
        }
    }
    let point = build_point(&sys, &v, &th, lambda, class);
    let mut demand = dispatch.demand.clone();
    for b in 0..nb {
        demand.p[b] = sys.pd(b, lambda);
        demand.q[b] = sys.qd(b, lambda);
    }
    let max_mismatch = max_mismatch(case, y, &point, &demand);
    Ok(PowerFlowResult {
        point,
        iterations: total,
        max_mismatch,
        modes: sys.modes.clone(),
    })
}

fn check_dims(case: &NetworkCase, d: &Dispatch) -> Result<(), PowerFlowError> {
    let ok = d.pg.len() == case.generators.len()
        && d.v_set.len() == case.generators.len()
        && d.pw.len() == case.wind_farms.len()
        && d.qw.len() == case.wind_farms.len()
        && d.ph.len() == case.electrolyzers.len()
        && d.qh.len() == case.electrolyzers.len()
        && d.demand.p.len() == case.buses.len()
        && d.demand.q.len() == case.buses.len();
    if ok {
        Ok(())
    } else {
        Err(PowerFlowError::Dimension("dispatch does not match the case".into()))
    }
}

// ---------------------------------------------------------------------------
// Continuation power flow

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LimitKind {
    ReactiveUpper,
    ReactiveLower,
    /// Scaled active output reached the machine rating.
    ActiveCap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitEvent {
    pub lambda: f64,
    pub generator: usize,
    pub kind: LimitKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StopReason {
    NosePoint,
    VoltageLimit { bus: usize },
    BranchLimit { branch: usize },
    /// A machine's active output left its capability region.
    CapabilityLimit { generator: usize },
    /// Demand does not grow with λ.
    Unbounded,
    LambdaCap,
    StepFloor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PvSample {
    pub lambda: f64,
    pub v_monitored: f64,
    pub v: Vec<f64>,
    pub pg: Vec<f64>,
    pub qg: Vec<f64>,
    pub modes: Vec<GenMode>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PvCurve {
    pub monitored_bus: usize,
    pub samples: Vec<PvSample>,
    pub lambda_max: f64,
    pub stop: StopReason,
    pub limit_events: Vec<LimitEvent>,
}

impl PvCurve {
    /// `lambda,v_monitored,event` rows; events are tagged on the sample at
    /// which they were applied.
    pub fn to_csv(&self, case: &NetworkCase) -> String {
        let mut out = String::from("lambda,v_monitored,event\n");
        for s in &self.samples {
            let tags: Vec<String> = self
                .limit_events
                .iter()
                .filter(|e| e.lambda == s.lambda)
                .map(|e| {
                    let bus = case.buses[case.generators[e.generator].bus].id;
                    format!("{:?}@gen{}(bus {})", e.kind, e.generator, bus)
                })
                .collect();
            let _ = writeln!(out, "{:.10},{:.10},{}", s.lambda, s.v_monitored, tags.join(" "));
        }
        let _ = writeln!(out, "# lambda_max = {:.10}, stop = {:?}", self.lambda_max, self.stop);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpfOptions {
    pub tolerance: f64,
    pub initial_step: f64,
    pub max_step: f64,
    pub min_step: f64,
    pub max_lambda: f64,
    pub max_steps: usize,
    pub corrector_iterations: usize,
    pub hysteresis: f64,
    pub check_voltage: bool,
    pub check_branch_flow: bool,
    pub start: Option<(Vec<f64>, Vec<f64>)>,
}

impl Default for CpfOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            initial_step: 0.05,
            max_step: 0.5,
            min_step: 1e-5,
            max_lambda: 20.0,
            max_steps: 2000,
            corrector_iterations: 12,
            hysteresis: 1e-9,
            check_voltage: true,
            check_branch_flow: true,
            start: None,
        }
    }
}

enum Violation {
    Capability(usize),
    Reactive(usize, GenMode),
    Voltage(usize),
    Branch(usize),
}

struct Tracer<'a> {
    sys: PfSystem<'a>,
    case: &'a NetworkCase,
    opts: &'a CpfOptions,
    nb: usize,
    /// Voltage band and flow ratings widened to contain the starting point,
    /// so only limits crossed along the trace count.
    v_lo: Vec<f64>,
    v_hi: Vec<f64>,
    s_lim: Vec<f64>,
}

impl<'a> Tracer<'a> {
    /// Full state `(v, θ, λ)` from an augmented reduced vector.
    fn expand(&self, z: &[f64], v: &mut [f64], th: &mut [f64]) -> f64 {
        self.sys.fixed_state(v, th);
        self.sys.scatter(&z[..self.sys.n], v, th);
        z[self.sys.n]
    }

    fn augmented(&self, v: &[f64], th: &[f64], lambda: f64) -> Vec<f64> {
        let mut z = self.sys.gather(v, th);
        z.push(lambda);
        z
    }

    fn tangent(&self, z: &[f64], v: &mut [f64], th: &mut [f64], k: usize, prev: Option<&[f64]>) -> Result<Vec<f64>, PowerFlowError> {
        let n = self.sys.n;
        let lambda = self.expand(z, v, th);
        let ev = self.sys.evaluate(v, th, lambda)?;
        let (mut trip, dlam) = self.sys.jacobian(v, th, lambda, &ev)?;
        for (i, d) in dlam.iter().enumerate() {
            trip.push((i, n, *d));
        }
        trip.push((n, k, 1.0));
        let mut rhs = vec![0.0; n + 1];
        rhs[n] = 1.0;
        let mut t = solve_sparse(n + 1, &trip, &rhs)?;
        let norm = t.iter().map(|a| a * a).sum::<f64>().sqrt();
        for a in &mut t {
            *a /= norm;
        }
        let flip = match prev {
            Some(p) if p.len() == t.len() => t.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() < 0.0,
            _ => t[n] < 0.0,
        };
        if flip {
            for a in &mut t {
                *a = -*a;
            }
        }
        Ok(t)
    }

    /// Newton on `[F(z); z_k − target] = 0`.
    fn correct(&self, z: &mut [f64], v: &mut [f64], th: &mut [f64], k: usize, target: f64) -> Result<usize, PowerFlowError> {
        let n = self.sys.n;
        z[k] = target;
        for it in 0..=self.opts.corrector_iterations {
            let lambda = self.expand(z, v, th);
            let ev = self.sys.evaluate(v, th, lambda)?;
            let res = linf(&ev.f);
            if res < self.opts.tolerance {
                return Ok(it);
            }
            if !res.is_finite() || it == self.opts.corrector_iterations {
                return Err(PowerFlowError::NonConvergence {
                    iterations: it,
                    residual: res,
                });
            }
            let (mut trip, dlam) = self.sys.jacobian(v, th, lambda, &ev)?;
            for (i, d) in dlam.iter().enumerate() {
                trip.push((i, n, *d));
            }
            trip.push((n, k, 1.0));
            let mut rhs: Vec<f64> = ev.f.iter().map(|f| -f).collect();
            rhs.push(0.0);
            let dz = solve_sparse(n + 1, &trip, &rhs)?;
            for i in 0..=n {
                z[i] += dz[i];
            }
            for b in 0..self.nb {
                if let Some(i) = self.sys.v_var[b] {
                    if z[i] <= 0.0 {
                        return Err(PowerFlowError::NonConvergence {
                            iterations: it + 1,
                            residual: res,
                        });
                    }
                }
            }
        }
        unreachable!()
    }

    fn first_violation(&self, v: &[f64], th: &[f64], lambda: f64) -> Result<Option<Violation>, PowerFlowError> {
        let (p, q) = injections(self.sys.y, v, th);
        for (g, gen) in self.case.generators.iter().enumerate() {
            let pg = self.sys.generator_pg(g, &p, lambda).abs();
            let vb = v[gen.bus];
            if pg > vb * gen.stator_current_max || pg > vb * gen.internal_emf / gen.synchronous_reactance {
                return Ok(Some(Violation::Capability(g)));
            }
        }
        let changes = limit_changes(&self.sys, v, &p, &q, lambda, self.opts.hysteresis, false)?;
        if let Some(&(g, mode)) = changes.first() {
            return Ok(Some(Violation::Reactive(g, mode)));
        }
        if self.opts.check_voltage {
            for b in 0..self.nb {
                if v[b] < self.v_lo[b] || v[b] > self.v_hi[b] {
                    return Ok(Some(Violation::Voltage(b)));
                }
            }
        }
        if self.opts.check_branch_flow {
            let point = self.point(v, th, lambda);
            for k in 0..self.case.branches.len() {
                if self.s_lim[k].is_finite() && branch_apparent_flow(self.case, &point, k) > self.s_lim[k] {
                    return Ok(Some(Violation::Branch(k)));
                }
            }
        }
        Ok(None)
    }

    fn point(&self, v: &[f64], th: &[f64], lambda: f64) -> OperatingPoint {
        build_point(&self.sys, v, th, lambda, PointClass::Slp)
    }

    fn sample(&self, v: &[f64], th: &[f64], lambda: f64, monitored: usize) -> PvSample {
        let p = self.point(v, th, lambda);
        PvSample {
            lambda,
            v_monitored: v[monitored],
            v: v.to_vec(),
            pg: p.pg,
            qg: p.qg,
            modes: self.sys.modes.clone(),
        }
    }
}

/// Trace the P-V curve from the dispatch along `growth` and return the
/// loading parameter of the first nose point or operating-limit violation.
pub fn cpf_loading_margin(
    case: &NetworkCase,
    y: &AdmittanceMatrix,
    dispatch: &Dispatch,
    growth: &Growth,
    opts: &CpfOptions,
) -> Result<PvCurve, PowerFlowError> {
    let nb = case.buses.len();
    let pf_opts = PowerFlowOptions {
        tolerance: opts.tolerance,
        hysteresis: opts.hysteresis,
        start: opts.start.clone(),
        ..PowerFlowOptions::default()
    };
    let base = solve_with_modes(
        case,
        y,
        dispatch,
        growth,
        0.0,
        vec![GenMode::Regulating; case.generators.len()],
        &pf_opts,
        PointClass::Cop,
    )
    .map_err(|e| PowerFlowError::InfeasibleStart(e.to_string()))?;

    let sys = PfSystem::new(case, y, dispatch, growth, base.modes.clone());
    let v_lo = (0..nb).map(|b| case.buses[b].v_min.min(base.point.v[b])).collect();
    let v_hi = (0..nb).map(|b| case.buses[b].v_max.max(base.point.v[b])).collect();
    let s_lim = (0..case.branches.len())
        .map(|k| {
            let br = &case.branches[k];
            if br.in_service {
                br.s_max.max(branch_apparent_flow(case, &base.point, k))
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let mut tracer = Tracer {
        sys,
        case,
        opts,
        nb,
        v_lo,
        v_hi,
        s_lim,
    };
    let mut v = base.point.v.clone();
    let mut th = base.point.theta.clone();
    let mut events = Vec::new();

    // Monitored bus: largest voltage sensitivity in the initial tangent.
    let mut z = tracer.augmented(&v, &th, 0.0);
    let n0 = tracer.sys.n;
    let t0 = tracer.tangent(&z, &mut v.clone(), &mut th.clone(), n0, None)?;
    let monitored = (0..nb)
        .filter_map(|b| tracer.sys.v_var[b].map(|i| (b, t0[i])))
        .fold(None, |best: Option<(usize, f64)>, (b, d)| match best {
            Some((_, bd)) if bd <= d => best,
            _ => Some((b, d)),
        })
        .map(|(b, _)| b)
        .unwrap_or(tracer.sys.slack_bus);

    let mut samples = vec![tracer.sample(&v, &th, 0.0, monitored)];

    if growth.demand_is_static() {
        return Ok(finish(monitored, samples, f64::INFINITY, StopReason::Unbounded, events));
    }

    let mut caps: Vec<(f64, usize)> = case
        .generators
        .iter()
        .enumerate()
        .filter(|(g, gen)| !gen.is_slack && growth.kg[*g] > 0.0 && dispatch.pg[*g] > 0.0 && dispatch.pg[*g] < gen.pg_max)
        .map(|(g, gen)| ((gen.pg_max / dispatch.pg[g] - 1.0) / growth.kg[g], g))
        .collect();
    caps.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    let mut lambda = 0.0f64;
    let mut lambda_max = 0.0f64;
    let mut sigma = opts.initial_step;
    let mut refining = false;
    let mut prev_t: Option<Vec<f64>> = None;
    let mut steps = 0;

    loop {
        steps += 1;
        if steps > opts.max_steps {
            return Ok(finish(monitored, samples, lambda_max, StopReason::StepFloor, events));
        }
        z = tracer.augmented(&v, &th, lambda);
        let n = tracer.sys.n;
        let t = tracer.tangent(&z, &mut v.clone(), &mut th.clone(), n, prev_t.as_deref())
            .or_else(|_| {
                // Near the nose the λ-parameterized tangent is singular.
                let k = prev_t
                    .as_ref()
                    .map(|p| argmax_abs(p))
                    .unwrap_or(n);
                tracer.tangent(&z, &mut v.clone(), &mut th.clone(), k, prev_t.as_deref())
            })?;
        let t = {
            // Re-solve with the locally best-conditioned parameter.
            let k = argmax_abs(&t);
            tracer.tangent(&z, &mut v.clone(), &mut th.clone(), k, Some(&t))?
        };
        if t[n] <= 0.0 {
            if prev_t.is_none() || lambda == 0.0 && samples.len() == 1 {
                // Already at (or beyond) the nose at the start.
                return Ok(finish(monitored, samples, lambda, StopReason::NosePoint, events));
            }
            // Limit-induced nose: the branch turns back right at a switch.
            return Ok(finish(monitored, samples, lambda_max.max(lambda), StopReason::NosePoint, events));
        }
        let k = argmax_abs(&t);
        let mut zn: Vec<f64> = z.iter().zip(&t).map(|(a, b)| a + sigma * b).collect();
        let target = zn[k];
        let mut vn = v.clone();
        let mut thn = th.clone();
        let iters = match tracer.correct(&mut zn, &mut vn, &mut thn, k, target) {
            Ok(it) => it,
            Err(_) => {
                sigma *= 0.5;
                if sigma < opts.min_step {
                    return Ok(finish(monitored, samples, lambda_max, StopReason::NosePoint, events));
                }
                continue;
            }
        };
        let lambda_n = tracer.expand(&zn, &mut vn, &mut thn);

        // Past the nose? Across an active-power cap the tangent jumps, so
        // only the sign of the λ change is trusted there.
        let cap_crossed = caps.iter().any(|c| c.0 > lambda && c.0 <= lambda_n);
        let tn = tracer.tangent(&zn, &mut vn.clone(), &mut thn.clone(), k, Some(&t));
        let turned = match &tn {
            Ok(tn) => tn[n] < 0.0 && !cap_crossed,
            Err(_) => false,
        } || lambda_n < lambda;
        if turned {
            trace!("cpf: turn at lambda {lambda:.6} -> {lambda_n:.6}, sigma {sigma:.3e}, k {k}");
            refining = true;
            sigma *= 0.5;
            if sigma < opts.min_step {
                return Ok(finish(monitored, samples, lambda_max, StopReason::NosePoint, events));
            }
            continue;
        }

        // Limits crossed inside the step?
        let crossing = tracer.first_violation(&vn, &thn, lambda_n)?;
        if crossing.is_some() {
            // Bisect along the arc for the first crossing.
            let (mut lo, mut hi) = (0.0, sigma);
            let mut best: Option<(Vec<f64>, Vec<f64>, f64)> = Some((vn.clone(), thn.clone(), lambda_n));
            for _ in 0..60 {
                if hi - lo < 1e-11 {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                let mut zm: Vec<f64> = z.iter().zip(&t).map(|(a, b)| a + mid * b).collect();
                let tm = zm[k];
                let mut vm = v.clone();
                let mut thm = th.clone();
                match tracer.correct(&mut zm, &mut vm, &mut thm, k, tm) {
                    Ok(_) => {
                        let lm = tracer.expand(&zm, &mut vm, &mut thm);
                        if tracer.first_violation(&vm, &thm, lm)?.is_some() {
                            hi = mid;
                            best = Some((vm, thm, lm));
                        } else {
                            lo = mid;
                        }
                    }
                    Err(_) => hi = mid,
                }
            }
            let (ve, the, le) = best.expect("crossing point");
            let viol = tracer
                .first_violation(&ve, &the, le)?
                .expect("violation persists at the bracket end");
            match viol {
                Violation::Capability(generator) => {
                    samples.push(tracer.sample(&ve, &the, le, monitored));
                    return Ok(finish(monitored, samples, le, StopReason::CapabilityLimit { generator }, events));
                }
                Violation::Voltage(bus) => {
                    samples.push(tracer.sample(&ve, &the, le, monitored));
                    return Ok(finish(monitored, samples, le, StopReason::VoltageLimit { bus }, events));
                }
                Violation::Branch(branch) => {
                    samples.push(tracer.sample(&ve, &the, le, monitored));
                    return Ok(finish(monitored, samples, le, StopReason::BranchLimit { branch }, events));
                }
                Violation::Reactive(..) => {
                    v = ve;
                    th = the;
                    lambda = le;
                    lambda_max = lambda_max.max(lambda);
                    // Switch every machine out of range at this point.
                    let mut guard = 0;
                    while let Some(Violation::Reactive(g, mode)) = tracer.first_violation(&v, &th, lambda)? {
                        guard += 1;
                        if guard > case.generators.len() {
                            break;
                        }
                        tracer.sys.set_mode(g, mode);
                        events.push(LimitEvent {
                            lambda,
                            generator: g,
                            kind: if mode == GenMode::AtUpper {
                                LimitKind::ReactiveUpper
                            } else {
                                LimitKind::ReactiveLower
                            },
                        });
                        debug!("cpf: generator {g} held at {mode:?} from lambda {lambda:.6}");
                        let mut zz = tracer.augmented(&v, &th, lambda);
                        let nn = tracer.sys.n;
                        let mut vv = v.clone();
                        let mut tt = th.clone();
                        match tracer.correct(&mut zz, &mut vv, &mut tt, nn, lambda) {
                            Ok(_) => {
                                v = vv;
                                th = tt;
                            }
                            Err(_) => {
                                // No solution with the machine held: collapse at the switch.
                                return Ok(finish(monitored, samples, lambda, StopReason::NosePoint, events));
                            }
                        }
                    }
                    samples.push(tracer.sample(&v, &th, lambda, monitored));
                    prev_t = None;
                    // Orientation after a switch is fixed by the sign of dλ.
                    continue;
                }
            }
        }
        while caps.first().is_some_and(|c| c.0 <= lambda_n) {
            let (lc, g) = caps.remove(0);
            events.push(LimitEvent {
                lambda: lc,
                generator: g,
                kind: LimitKind::ActiveCap,
            });
        }

        trace!("cpf: step to lambda {lambda_n:.6}, sigma {sigma:.3e}, k {k}, iters {iters}");
        v = vn;
        th = thn;
        lambda = lambda_n;
        lambda_max = lambda_max.max(lambda);
        samples.push(tracer.sample(&v, &th, lambda, monitored));
        prev_t = if cap_crossed { None } else { tn.ok() };
        if lambda >= opts.max_lambda {
            return Ok(finish(monitored, samples, lambda, StopReason::LambdaCap, events));
        }
        // A step past a kink in the schedule can look like a turn; once a
        // shorter step gets through, let the step length recover.
        if refining {
            refining = false;
        } else if iters <= 4 {
            sigma = (sigma * 1.5).min(opts.max_step);
        }
    }
}

fn argmax_abs(t: &[f64]) -> usize {
    let mut k = 0;
    for i in 1..t.len() {
        if t[i].abs() > t[k].abs() {
            k = i;
        }
    }
    k
}

fn finish(monitored: usize, samples: Vec<PvSample>, lambda_max: f64, stop: StopReason, limit_events: Vec<LimitEvent>) -> PvCurve {
    debug!("cpf stop: {stop:?} at lambda {lambda_max:.6}");
    PvCurve {
        monitored_bus: monitored,
        samples,
        lambda_max,
        stop,
        limit_events,
    }
}
