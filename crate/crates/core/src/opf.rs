//! Two-operating-point hydrogen OPF.
//!
//! Every hour is modelled twice: at the current operating point (COP), where
//! hydrogen is produced, and at a security limit point (SLP) reached by
//! scaling demand and generation with the loading parameter λ. The SLP must
//! satisfy the full AC network model, so the electrolyzer demand chosen at
//! the COP leaves at least `lm_required` of loading margin.
//!
//! The `min` operators in the SLP generator model are expressed with relaxed
//! binaries `y` (which capability circle bounds reactive output) and `z`
//! (whether scaled output hits the rating); the solver drives them to
//! {0, 1} by penalty homotopy.

use std::fmt::Write as _;

use h2margin_nlp::{NlpProblem, SolveReport, SolverOptions};
use log::debug;
use serde::{Deserialize, Serialize};

use crate::capability::{cot, q_envelope};
use crate::network::{
    build_admittance, nodal_demand, wind_available, AdmittanceMatrix, CaseError, ElectrolyzerRecord, HourlyProfile,
    NetworkCase, NodalDemand,
};
use crate::powerflow::{
    cpf_loading_margin, max_mismatch, newton_solve, CpfOptions, Dispatch, Growth, OperatingPoint, PointClass,
    PowerFlowOptions, StopReason,
};

#[derive(Debug, thiserror::Error)]
pub enum OpfError {
    #[error("no P2H units: the candidate set is empty")]
    NoCandidates,
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("inconsistent bounds: {0}")]
    InfeasibleBounds(String),
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    Solver(#[from] h2margin_nlp::NlpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Every candidate bus gets an electrolyzer up to the allocation ceiling.
    Allocate,
    /// Locations and sizes come from the case.
    Dispatch,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "allocate" => Ok(Mode::Allocate),
            "dispatch" => Ok(Mode::Dispatch),
            _ => Err(format!("unknown mode '{s}', expected allocate or dispatch")),
        }
    }
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Allocate => "allocate",
            Mode::Dispatch => "dispatch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Wind penetration cap as a fraction of hourly demand.
    pub alpha: f64,
    /// Loading margin the SLP must reach.
    pub lm_required: f64,
    pub horizon: usize,
    pub profiles: Vec<HourlyProfile>,
    pub mode: Mode,
    /// Candidate bus indices for allocation; all buses without a generator
    /// when absent.
    pub candidates: Option<Vec<usize>>,
    /// Per-unit size ceiling of allocation candidates.
    pub allocation_ceiling: f64,
    /// Hydrogen yield (kg/MWh) of allocation candidates.
    pub efficiency: f64,
    /// Relaxation of the voltage/reactive-limit complementarity products.
    pub complementarity_eps: f64,
    /// Wind farms and electrolyzers run at unity power factor.
    pub unity_power_factor: bool,
    /// Let electrolyzers shed load at the SLP instead of holding their COP demand.
    pub curtailable_electrolyzers: bool,
    pub enforce_reserve: bool,
    /// Allocations below this size (MW) are left out of the report.
    pub size_epsilon_mw: f64,
}

impl ScenarioConfig {
    pub fn new(profiles: Vec<HourlyProfile>, alpha: f64, lm_required: f64, mode: Mode) -> Self {
        ScenarioConfig {
            alpha,
            lm_required,
            horizon: profiles.len(),
            profiles,
            mode,
            candidates: None,
            allocation_ceiling: 10.0,
            efficiency: 13.90,
            complementarity_eps: 1e-7,
            unity_power_factor: true,
            curtailable_electrolyzers: false,
            enforce_reserve: true,
            size_epsilon_mw: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), OpfError> {
        let bad = |m: String| Err(OpfError::InvalidScenario(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.lm_required >= 0.0 && self.lm_required.is_finite()) {
            return bad(format!("lm_required must be non-negative, got {}", self.lm_required));
        }
        if self.horizon == 0 || self.horizon > self.profiles.len() {
            return bad(format!(
                "horizon {} needs between 1 and {} profile rows",
                self.horizon,
                self.profiles.len()
            ));
        }
        if !(self.allocation_ceiling > 0.0) || !(self.efficiency > 0.0) {
            return bad("allocation ceiling and efficiency must be positive".into());
        }
        if !(self.complementarity_eps >= 0.0) {
            return bad("complementarity_eps must be non-negative".into());
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Catalog

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConstraintKind {
    ActiveBalance,
    ReactiveBalance,
    Reserve,
    WindCap,
    RampUp,
    RampDown,
    ArmatureCircle,
    FieldCircle,
    FieldRoot,
    CopQUpperArmature,
    CopQUpperField,
    QLower,
    SlpQCap,
    QCapArmature,
    QCapField,
    QCapArmatureSelect,
    QCapFieldSelect,
    PgScaleUpper,
    PgScaleSelect,
    PgCapSelect,
    BranchFlowFrom,
    BranchFlowTo,
    VoltageCoupling,
    ComplementarityUp,
    ComplementarityDown,
    LoadingPin,
    HydrogenCoupling,
    WindCoupling,
    BinaryY,
    BinaryZ,
}

impl ConstraintKind {
    pub const ALL: [ConstraintKind; 30] = [
        ConstraintKind::ActiveBalance,
        ConstraintKind::ReactiveBalance,
        ConstraintKind::Reserve,
        ConstraintKind::WindCap,
        ConstraintKind::RampUp,
        ConstraintKind::RampDown,
        ConstraintKind::ArmatureCircle,
        ConstraintKind::FieldCircle,
        ConstraintKind::FieldRoot,
        ConstraintKind::CopQUpperArmature,
        ConstraintKind::CopQUpperField,
        ConstraintKind::QLower,
        ConstraintKind::SlpQCap,
        ConstraintKind::QCapArmature,
        ConstraintKind::QCapField,
        ConstraintKind::QCapArmatureSelect,
        ConstraintKind::QCapFieldSelect,
        ConstraintKind::PgScaleUpper,
        ConstraintKind::PgScaleSelect,
        ConstraintKind::PgCapSelect,
        ConstraintKind::BranchFlowFrom,
        ConstraintKind::BranchFlowTo,
        ConstraintKind::VoltageCoupling,
        ConstraintKind::ComplementarityUp,
        ConstraintKind::ComplementarityDown,
        ConstraintKind::LoadingPin,
        ConstraintKind::HydrogenCoupling,
        ConstraintKind::WindCoupling,
        ConstraintKind::BinaryY,
        ConstraintKind::BinaryZ,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConstraintKind::ActiveBalance => "active_balance",
            ConstraintKind::ReactiveBalance => "reactive_balance",
            ConstraintKind::Reserve => "reserve",
            ConstraintKind::WindCap => "wind_cap",
            ConstraintKind::RampUp => "ramp_up",
            ConstraintKind::RampDown => "ramp_down",
            ConstraintKind::ArmatureCircle => "armature_circle",
            ConstraintKind::FieldCircle => "field_circle",
            ConstraintKind::FieldRoot => "field_root",
            ConstraintKind::CopQUpperArmature => "cop_q_upper_armature",
            ConstraintKind::CopQUpperField => "cop_q_upper_field",
            ConstraintKind::QLower => "q_lower",
            ConstraintKind::SlpQCap => "slp_q_cap",
            ConstraintKind::QCapArmature => "q_cap_armature",
            ConstraintKind::QCapField => "q_cap_field",
            ConstraintKind::QCapArmatureSelect => "q_cap_armature_select",
            ConstraintKind::QCapFieldSelect => "q_cap_field_select",
            ConstraintKind::PgScaleUpper => "pg_scale_upper",
            ConstraintKind::PgScaleSelect => "pg_scale_select",
            ConstraintKind::PgCapSelect => "pg_cap_select",
            ConstraintKind::BranchFlowFrom => "branch_flow_from",
            ConstraintKind::BranchFlowTo => "branch_flow_to",
            ConstraintKind::VoltageCoupling => "voltage_coupling",
            ConstraintKind::ComplementarityUp => "complementarity_up",
            ConstraintKind::ComplementarityDown => "complementarity_down",
            ConstraintKind::LoadingPin => "loading_pin",
            ConstraintKind::HydrogenCoupling => "hydrogen_coupling",
            ConstraintKind::WindCoupling => "wind_coupling",
            ConstraintKind::BinaryY => "binary_y",
            ConstraintKind::BinaryZ => "binary_z",
        }
    }

    /// Rows that only support the numerical model rather than the physics.
    pub fn is_plumbing(self) -> bool {
        matches!(
            self,
            ConstraintKind::FieldRoot
                | ConstraintKind::LoadingPin
                | ConstraintKind::HydrogenCoupling
                | ConstraintKind::WindCoupling
        )
    }

    /// Enforced by the solver penalty instead of a row.
    pub fn is_penalty(self) -> bool {
        matches!(self, ConstraintKind::BinaryY | ConstraintKind::BinaryZ)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub kind: ConstraintKind,
    pub hour: usize,
    pub point: Option<PointClass>,
    /// Bus, generator, branch, farm or electrolyzer index, by kind.
    pub element: Option<usize>,
    pub equality: bool,
}

// ---------------------------------------------------------------------------
// Variable layout

#[derive(Debug, Clone, PartialEq)]
pub struct VarLayout {
    pub nb: usize,
    pub ng: usize,
    pub nw: usize,
    pub ne: usize,
    pub horizon: usize,
    block: usize,
    hour: usize,
    pub n: usize,
}

impl VarLayout {
    fn new(nb: usize, ng: usize, nw: usize, ne: usize, horizon: usize) -> Self {
        let block = 2 * nb + 4 * ng + 2 * nw + 2 * ne;
        let hour = 2 * block + 5 * ng;
        VarLayout {
            nb,
            ng,
            nw,
            ne,
            horizon,
            block,
            hour,
            n: hour * horizon + 1,
        }
    }

    fn base(&self, t: usize, c: PointClass) -> usize {
        t * self.hour + c.index() * self.block
    }

    pub fn v(&self, t: usize, c: PointClass, b: usize) -> usize {
        self.base(t, c) + b
    }
    pub fn theta(&self, t: usize, c: PointClass, b: usize) -> usize {
        self.base(t, c) + self.nb + b
    }
    pub fn pg(&self, t: usize, c: PointClass, g: usize) -> usize {
        self.base(t, c) + 2 * self.nb + g
    }
    pub fn qg(&self, t: usize, c: PointClass, g: usize) -> usize {
        self.base(t, c) + 2 * self.nb + self.ng + g
    }
    /// Armature-circle reactive limit.
    pub fn l1(&self, t: usize, c: PointClass, g: usize) -> usize {
        self.base(t, c) + 2 * self.nb + 2 * self.ng + g
    }
    /// Field-circle reactive limit.
    pub fn l2(&self, t: usize, c: PointClass, g: usize) -> usize {
        self.base(t, c) + 2 * self.nb + 3 * self.ng + g
    }
    pub fn pw(&self, t: usize, c: PointClass, w: usize) -> usize {
        self.base(t, c) + 2 * self.nb + 4 * self.ng + w
    }
    pub fn qw(&self, t: usize, c: PointClass, w: usize) -> usize {
        self.base(t, c) + 2 * self.nb + 4 * self.ng + self.nw + w
    }
    pub fn ph(&self, t: usize, c: PointClass, e: usize) -> usize {
        self.base(t, c) + 2 * self.nb + 4 * self.ng + 2 * self.nw + e
    }
    pub fn qh(&self, t: usize, c: PointClass, e: usize) -> usize {
        self.base(t, c) + 2 * self.nb + 4 * self.ng + 2 * self.nw + self.ne + e
    }
    /// SLP reactive ceiling `min(l1, l2)`.
    pub fn qmax(&self, t: usize, g: usize) -> usize {
        t * self.hour + 2 * self.block + g
    }
    pub fn y(&self, t: usize, g: usize) -> usize {
        t * self.hour + 2 * self.block + self.ng + g
    }
    pub fn z(&self, t: usize, g: usize) -> usize {
        t * self.hour + 2 * self.block + 2 * self.ng + g
    }
    pub fn v_up(&self, t: usize, g: usize) -> usize {
        t * self.hour + 2 * self.block + 3 * self.ng + g
    }
    pub fn v_dn(&self, t: usize, g: usize) -> usize {
        t * self.hour + 2 * self.block + 4 * self.ng + g
    }
    pub fn lambda(&self) -> usize {
        self.n - 1
    }
}

// ---------------------------------------------------------------------------
// Row expressions

/// `c·vb² + Σ vb·vk·(a cos(θb − θk) + β sin(θb − θk))`.
#[derive(Debug, Clone, PartialEq)]
struct Flow {
    vb: usize,
    tb: usize,
    diag: f64,
    terms: Vec<(usize, usize, f64, f64)>,
}

impl Flow {
    fn value(&self, x: &[f64]) -> f64 {
        let vb = x[self.vb];
        let mut s = self.diag * vb * vb;
        for &(vk, tk, a, b) in &self.terms {
            let (sn, cs) = (x[self.tb] - x[tk]).sin_cos();
            s += vb * x[vk] * (a * cs + b * sn);
        }
        s
    }

    fn jac_cols(&self, out: &mut Vec<usize>) {
        out.push(self.vb);
        out.push(self.tb);
        for &(vk, tk, _, _) in &self.terms {
            out.push(vk);
            out.push(tk);
        }
    }

    fn jac_vals(&self, x: &[f64], scale: f64, out: &mut Vec<f64>) {
        let vb = x[self.vb];
        let tb = x[self.tb];
        let head = out.len();
        out.push(2.0 * self.diag * vb * scale);
        out.push(0.0);
        for &(vk, tk, a, b) in &self.terms {
            let (sn, cs) = (tb - x[tk]).sin_cos();
            let m = a * cs + b * sn;
            let d = -a * sn + b * cs;
            let vk = x[vk];
            out[head] += vk * m * scale;
            out[head + 1] += vb * vk * d * scale;
            out.push(vb * m * scale);
            out.push(-vb * vk * d * scale);
        }
    }

    fn hess_pairs(&self, out: &mut Vec<(usize, usize)>) {
        out.push((self.vb, self.vb));
        out.push((self.tb, self.tb));
        out.push((self.vb, self.tb));
        for &(vk, tk, _, _) in &self.terms {
            out.push((self.vb, vk));
            out.push((self.vb, tk));
            out.push((self.tb, vk));
            out.push((self.tb, tk));
            out.push((vk, tk));
            out.push((tk, tk));
        }
    }

    fn hess_vals(&self, x: &[f64], w: f64, out: &mut Vec<f64>) {
        let vb = x[self.vb];
        let tb = x[self.tb];
        let head = out.len();
        out.push(2.0 * self.diag * w);
        out.push(0.0);
        out.push(0.0);
        for &(vk, tk, a, b) in &self.terms {
            let (sn, cs) = (tb - x[tk]).sin_cos();
            let m = a * cs + b * sn;
            let d = -a * sn + b * cs;
            let vk = x[vk];
            out[head + 1] -= vb * vk * m * w;
            out[head + 2] += vk * d * w;
            out.push(m * w);
            out.push(-vk * d * w);
            out.push(vb * d * w);
            out.push(vb * vk * m * w);
            out.push(-vb * d * w);
            out.push(-vb * vk * m * w);
        }
    }

    /// Local gradient and Hessian over `(vb, tb, vk, tk)` for single-term flows.
    fn local(&self, x: &[f64]) -> (f64, [f64; 4], [[f64; 4]; 4]) {
        debug_assert_eq!(self.terms.len(), 1);
        let (vk_i, tk_i, a, b) = self.terms[0];
        let (vb, tb, vk, tk) = (x[self.vb], x[self.tb], x[vk_i], x[tk_i]);
        let (sn, cs) = (tb - tk).sin_cos();
        let m = a * cs + b * sn;
        let d = -a * sn + b * cs;
        let val = self.diag * vb * vb + vb * vk * m;
        let g = [2.0 * self.diag * vb + vk * m, vb * vk * d, vb * m, -vb * vk * d];
        let mut h = [[0.0; 4]; 4];
        let mut set = |i: usize, j: usize, v: f64| {
            h[i][j] = v;
            h[j][i] = v;
        };
        set(0, 0, 2.0 * self.diag);
        set(1, 1, -vb * vk * m);
        set(0, 1, vk * d);
        set(0, 2, m);
        set(0, 3, -vk * d);
        set(1, 2, vb * d);
        set(1, 3, vb * vk * m);
        set(2, 3, -vb * d);
        set(3, 3, -vb * vk * m);
        (val, g, h)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Expr {
    /// `constant + Σ a·x + Σ q·x_i·x_j`.
    Poly {
        constant: f64,
        linear: Vec<(usize, f64)>,
        quad: Vec<(usize, usize, f64)>,
    },
    /// `constant + Σ a·x + flow`.
    Balance {
        constant: f64,
        linear: Vec<(usize, f64)>,
        flow: Flow,
    },
    /// `(P² + Q²)/S̄² − 1` with both flows over `(vf, θf, vt, θt)`.
    BranchLimit { p: Flow, q: Flow, inv_s2: f64 },
    /// `s·(pg² + (l2 + v²/xs)² − k²v²)`.
    FieldCircle {
        pg: usize,
        l2: usize,
        v: usize,
        inv_xs: f64,
        k2: f64,
        scale: f64,
    },
    /// `(qg − pg·cot δ + v²/xs)·v_dn − ε`.
    ComplementarityDown {
        qg: usize,
        pg: usize,
        v: usize,
        vdn: usize,
        cot: f64,
        inv_xs: f64,
        eps: f64,
    },
}

fn linear(constant: f64, terms: Vec<(usize, f64)>) -> Expr {
    Expr::Poly {
        constant,
        linear: terms,
        quad: Vec::new(),
    }
}

impl Expr {
    fn value(&self, x: &[f64]) -> f64 {
        match self {
            Expr::Poly { constant, linear, quad } => {
                let mut s = *constant;
                for &(j, a) in linear {
                    s += a * x[j];
                }
                for &(i, j, q) in quad {
                    s += q * x[i] * x[j];
                }
                s
            }
            Expr::Balance { constant, linear, flow } => {
                let mut s = *constant + flow.value(x);
                for &(j, a) in linear {
                    s += a * x[j];
                }
                s
            }
            Expr::BranchLimit { p, q, inv_s2 } => {
                let (pv, qv) = (p.value(x), q.value(x));
                (pv * pv + qv * qv) * inv_s2 - 1.0
            }
            Expr::FieldCircle {
                pg,
                l2,
                v,
                inv_xs,
                k2,
                scale,
            } => {
                let (p, l, vv) = (x[*pg], x[*l2], x[*v]);
                let r = l + vv * vv * inv_xs;
                scale * (p * p + r * r - k2 * vv * vv)
            }
            Expr::ComplementarityDown {
                qg,
                pg,
                v,
                vdn,
                cot,
                inv_xs,
                eps,
            } => {
                let vv = x[*v];
                (x[*qg] - cot * x[*pg] + vv * vv * inv_xs) * x[*vdn] - eps
            }
        }
    }

    fn jac_cols(&self, out: &mut Vec<usize>) {
        match self {
            Expr::Poly { linear, quad, .. } => {
                out.extend(linear.iter().map(|e| e.0));
                for &(i, j, _) in quad {
                    out.push(i);
                    if i != j {
                        out.push(j);
                    }
                }
            }
            Expr::Balance { linear, flow, .. } => {
                out.extend(linear.iter().map(|e| e.0));
                flow.jac_cols(out);
            }
            Expr::BranchLimit { p, .. } => {
                let (vk, tk, _, _) = p.terms[0];
                out.extend([p.vb, p.tb, vk, tk]);
            }
            Expr::FieldCircle { pg, l2, v, .. } => out.extend([*pg, *l2, *v]),
            Expr::ComplementarityDown { qg, pg, v, vdn, .. } => out.extend([*qg, *pg, *v, *vdn]),
        }
    }

    fn jac_vals(&self, x: &[f64], out: &mut Vec<f64>) {
        match self {
            Expr::Poly { linear, quad, .. } => {
                out.extend(linear.iter().map(|e| e.1));
                for &(i, j, q) in quad {
                    if i == j {
                        out.push(2.0 * q * x[i]);
                    } else {
                        out.push(q * x[j]);
                        out.push(q * x[i]);
                    }
                }
            }
            Expr::Balance { linear, flow, .. } => {
                out.extend(linear.iter().map(|e| e.1));
                flow.jac_vals(x, 1.0, out);
            }
            Expr::BranchLimit { p, q, inv_s2 } => {
                let (pv, gp, _) = p.local(x);
                let (qv, gq, _) = q.local(x);
                for k in 0..4 {
                    out.push(2.0 * inv_s2 * (pv * gp[k] + qv * gq[k]));
                }
            }
            Expr::FieldCircle {
                pg,
                l2,
                v,
                inv_xs,
                k2,
                scale,
            } => {
                let (p, l, vv) = (x[*pg], x[*l2], x[*v]);
                let r = l + vv * vv * inv_xs;
                out.push(scale * 2.0 * p);
                out.push(scale * 2.0 * r);
                out.push(scale * (4.0 * r * vv * inv_xs - 2.0 * k2 * vv));
            }
            Expr::ComplementarityDown {
                qg,
                pg,
                v,
                vdn,
                cot,
                inv_xs,
                ..
            } => {
                let (vv, d) = (x[*v], x[*vdn]);
                out.push(d);
                out.push(-cot * d);
                out.push(2.0 * vv * inv_xs * d);
                out.push(x[*qg] - cot * x[*pg] + vv * vv * inv_xs);
            }
        }
    }

    fn hess_pairs(&self, out: &mut Vec<(usize, usize)>) {
        match self {
            Expr::Poly { quad, .. } => out.extend(quad.iter().map(|&(i, j, _)| (i, j))),
            Expr::Balance { flow, .. } => flow.hess_pairs(out),
            Expr::BranchLimit { p, .. } => {
                let (vk, tk, _, _) = p.terms[0];
                let ix = [p.vb, p.tb, vk, tk];
                for i in 0..4 {
                    for j in 0..=i {
                        out.push((ix[i], ix[j]));
                    }
                }
            }
            Expr::FieldCircle { pg, l2, v, .. } => out.extend([(*pg, *pg), (*l2, *l2), (*l2, *v), (*v, *v)]),
            Expr::ComplementarityDown { qg, pg, v, vdn, .. } => {
                out.extend([(*qg, *vdn), (*pg, *vdn), (*v, *vdn), (*v, *v)])
            }
        }
    }

    fn hess_vals(&self, x: &[f64], w: f64, out: &mut Vec<f64>) {
        match self {
            Expr::Poly { quad, .. } => out.extend(quad.iter().map(|&(i, j, q)| if i == j { 2.0 * q * w } else { q * w })),
            Expr::Balance { flow, .. } => flow.hess_vals(x, w, out),
            Expr::BranchLimit { p, q, inv_s2 } => {
                let (pv, gp, hp) = p.local(x);
                let (qv, gq, hq) = q.local(x);
                for i in 0..4 {
                    for j in 0..=i {
                        let h = gp[i] * gp[j] + pv * hp[i][j] + gq[i] * gq[j] + qv * hq[i][j];
                        out.push(2.0 * inv_s2 * h * w);
                    }
                }
            }
            Expr::FieldCircle { l2, v, inv_xs, k2, scale, .. } => {
                let (l, vv) = (x[*l2], x[*v]);
                let r = l + vv * vv * inv_xs;
                out.push(2.0 * scale * w);
                out.push(2.0 * scale * w);
                out.push(4.0 * vv * inv_xs * scale * w);
                let dvv = 8.0 * vv * vv * inv_xs * inv_xs + 4.0 * r * inv_xs - 2.0 * k2;
                out.push(dvv * scale * w);
            }
            Expr::ComplementarityDown {
                v, vdn, cot, inv_xs, ..
            } => {
                out.push(w);
                out.push(-cot * w);
                out.push(2.0 * x[*v] * inv_xs * w);
                out.push(2.0 * x[*vdn] * inv_xs * w);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Model instance

#[derive(Debug, Clone)]
pub struct ModelInstance {
    pub case: NetworkCase,
    pub scenario: ScenarioConfig,
    pub layout: VarLayout,
    pub catalog: Vec<CatalogEntry>,
    /// Binary equalities handled by the solver penalty.
    pub penalty_catalog: Vec<CatalogEntry>,
    pub demand: Vec<NodalDemand>,
    pub wind: Vec<Vec<f64>>,
    pub admittance: AdmittanceMatrix,
    rows: Vec<Expr>,
    xl: Vec<f64>,
    xu: Vec<f64>,
    jac_offsets: Vec<usize>,
    jac_structure: Vec<(usize, usize)>,
    hess_offsets: Vec<usize>,
    hess_structure: Vec<(usize, usize)>,
    binaries: Vec<usize>,
    /// Objective weight per electrolyzer, `η_e / η_ref`.
    weights: Vec<f64>,
}

/// Electrolyzer set for the scenario.
fn electrolyzer_set(case: &NetworkCase, sc: &ScenarioConfig) -> Result<Vec<ElectrolyzerRecord>, OpfError> {
    match sc.mode {
        Mode::Dispatch => {
            if case.electrolyzers.is_empty() {
                return Err(OpfError::NoCandidates);
            }
            Ok(case.electrolyzers.clone())
        }
        Mode::Allocate => {
            let gen_at = case.generator_at_bus();
            let buses: Vec<usize> = match &sc.candidates {
                Some(c) => {
                    for &b in c {
                        if b >= case.buses.len() {
                            return Err(OpfError::InvalidScenario(format!("candidate bus index {b} out of range")));
                        }
                    }
                    c.clone()
                }
                None => (0..case.buses.len()).filter(|&b| gen_at[b].is_none()).collect(),
            };
            if buses.is_empty() {
                return Err(OpfError::NoCandidates);
            }
            Ok(buses
                .into_iter()
                .map(|bus| ElectrolyzerRecord {
                    bus,
                    ph_min: 0.0,
                    ph_max: sc.allocation_ceiling,
                    qh_min: 0.0,
                    qh_max: 0.0,
                    efficiency: sc.efficiency,
                })
                .collect())
        }
    }
}

struct Builder {
    rows: Vec<Expr>,
    catalog: Vec<CatalogEntry>,
}

impl Builder {
    fn push(&mut self, expr: Expr, kind: ConstraintKind, hour: usize, point: Option<PointClass>, element: Option<usize>, equality: bool) {
        self.rows.push(expr);
        self.catalog.push(CatalogEntry {
            kind,
            hour,
            point,
            element,
            equality,
        });
    }
}

impl ModelInstance {
    pub fn assemble(case: &NetworkCase, scenario: &ScenarioConfig) -> Result<ModelInstance, OpfError> {
        scenario.validate()?;
        case.validate()?;
        let case = case.with_electrolyzers(electrolyzer_set(case, scenario)?);
        let sc = scenario;
        let (nb, ng, nw, ne) = (
            case.buses.len(),
            case.generators.len(),
            case.wind_farms.len(),
            case.electrolyzers.len(),
        );
        let horizon = sc.horizon;
        let lay = VarLayout::new(nb, ng, nw, ne, horizon);
        let y = build_admittance(&case);
        let slack = case.slack_generator();
        let profiles = &sc.profiles[..horizon];
        let demand: Vec<NodalDemand> = profiles.iter().map(|p| nodal_demand(&case, p)).collect::<Result<_, _>>()?;
        let wind: Vec<Vec<f64>> = profiles.iter().map(|p| wind_available(&case, p)).collect();
        let growth = Growth::from_case(&case);

        // Variable bounds.
        let inf = f64::INFINITY;
        let mut xl = vec![-inf; lay.n];
        let mut xu = vec![inf; lay.n];
        let mut set = |j: usize, lo: f64, hi: f64| {
            xl[j] = lo;
            xu[j] = hi;
        };
        for t in 0..horizon {
            for c in PointClass::BOTH {
                for (b, bus) in case.buses.iter().enumerate() {
                    set(lay.v(t, c, b), bus.v_min, bus.v_max);
                }
                set(lay.theta(t, c, case.slack_bus()), 0.0, 0.0);
                for (g, gen) in case.generators.iter().enumerate() {
                    set(lay.pg(t, c, g), gen.pg_min, gen.pg_max);
                    set(lay.l1(t, c, g), 0.0, inf);
                }
                for (w, farm) in case.wind_farms.iter().enumerate() {
                    set(lay.pw(t, c, w), 0.0, wind[t][w]);
                    if sc.unity_power_factor {
                        set(lay.qw(t, c, w), 0.0, 0.0);
                    } else {
                        set(lay.qw(t, c, w), farm.qw_min, farm.qw_max);
                    }
                }
                for (e, el) in case.electrolyzers.iter().enumerate() {
                    set(lay.ph(t, c, e), el.ph_min, el.ph_max);
                    if sc.unity_power_factor {
                        set(lay.qh(t, c, e), 0.0, 0.0);
                    } else {
                        set(lay.qh(t, c, e), el.qh_min, el.qh_max);
                    }
                }
            }
            for g in 0..ng {
                set(lay.y(t, g), 0.0, 1.0);
                if g == slack {
                    set(lay.z(t, g), 0.0, 0.0);
                } else {
                    set(lay.z(t, g), 0.0, 1.0);
                }
                set(lay.v_up(t, g), 0.0, inf);
                set(lay.v_dn(t, g), 0.0, inf);
            }
        }
        set(lay.lambda(), 0.0, inf);
        for j in 0..lay.n {
            if xl[j] > xu[j] {
                return Err(OpfError::InfeasibleBounds(format!("variable {j}: [{}, {}]", xl[j], xu[j])));
            }
        }

        let mut bld = Builder {
            rows: Vec::new(),
            catalog: Vec::new(),
        };
        let lam = lay.lambda();
        let cop = PointClass::Cop;
        let slp = PointClass::Slp;

        for t in 0..horizon {
            let d = &demand[t];
            for c in PointClass::BOTH {
                // Nodal balances.
                for b in 0..nb {
                    let (mut lin_p, mut lin_q) = (Vec::new(), Vec::new());
                    for (g, gen) in case.generators.iter().enumerate() {
                        if gen.bus == b {
                            lin_p.push((lay.pg(t, c, g), -1.0));
                            lin_q.push((lay.qg(t, c, g), -1.0));
                        }
                    }
                    for (w, farm) in case.wind_farms.iter().enumerate() {
                        if farm.bus == b {
                            lin_p.push((lay.pw(t, c, w), -1.0));
                            lin_q.push((lay.qw(t, c, w), -1.0));
                        }
                    }
                    for (e, el) in case.electrolyzers.iter().enumerate() {
                        if el.bus == b {
                            lin_p.push((lay.ph(t, c, e), 1.0));
                            lin_q.push((lay.qh(t, c, e), 1.0));
                        }
                    }
                    if c == slp {
                        let (kp, kq) = (growth.kp[b] * d.p[b], growth.kq[b] * d.q[b]);
                        if kp != 0.0 {
                            lin_p.push((lam, kp));
                        }
                        if kq != 0.0 {
                            lin_q.push((lam, kq));
                        }
                    }
                    let ybb = y.get(b, b);
                    let mut tp = Vec::new();
                    let mut tq = Vec::new();
                    for (k, ybk) in y.row(b) {
                        if k != b {
                            tp.push((lay.v(t, c, k), lay.theta(t, c, k), ybk.re, ybk.im));
                            tq.push((lay.v(t, c, k), lay.theta(t, c, k), -ybk.im, ybk.re));
                        }
                    }
                    let (vb, tb) = (lay.v(t, c, b), lay.theta(t, c, b));
                    bld.push(
                        Expr::Balance {
                            constant: d.p[b],
                            linear: lin_p,
                            flow: Flow {
                                vb,
                                tb,
                                diag: ybb.re,
                                terms: tp,
                            },
                        },
                        ConstraintKind::ActiveBalance,
                        t,
                        Some(c),
                        Some(b),
                        true,
                    );
                    bld.push(
                        Expr::Balance {
                            constant: d.q[b],
                            linear: lin_q,
                            flow: Flow {
                                vb,
                                tb,
                                diag: -ybb.im,
                                terms: tq,
                            },
                        },
                        ConstraintKind::ReactiveBalance,
                        t,
                        Some(c),
                        Some(b),
                        true,
                    );
                }

                // Generator capability.
                for (g, gen) in case.generators.iter().enumerate() {
                    let (pg, qg, l1, l2) = (lay.pg(t, c, g), lay.qg(t, c, g), lay.l1(t, c, g), lay.l2(t, c, g));
                    let v = lay.v(t, c, gen.bus);
                    let ig = gen.stator_current_max;
                    let inv_xs = 1.0 / gen.synchronous_reactance;
                    let k = gen.internal_emf * inv_xs;
                    bld.push(
                        Expr::Poly {
                            constant: 0.0,
                            linear: Vec::new(),
                            quad: vec![(pg, pg, 1.0 / (ig * ig)), (l1, l1, 1.0 / (ig * ig)), (v, v, -1.0)],
                        },
                        ConstraintKind::ArmatureCircle,
                        t,
                        Some(c),
                        Some(g),
                        true,
                    );
                    bld.push(
                        Expr::FieldCircle {
                            pg,
                            l2,
                            v,
                            inv_xs,
                            k2: k * k,
                            scale: 1.0 / (k * k),
                        },
                        ConstraintKind::FieldCircle,
                        t,
                        Some(c),
                        Some(g),
                        true,
                    );
                    bld.push(
                        Expr::Poly {
                            constant: 0.0,
                            linear: vec![(l2, -1.0)],
                            quad: vec![(v, v, -inv_xs)],
                        },
                        ConstraintKind::FieldRoot,
                        t,
                        Some(c),
                        Some(g),
                        false,
                    );
                    bld.push(
                        Expr::Poly {
                            constant: 0.0,
                            linear: vec![(pg, cot(gen.delta_max)), (qg, -1.0)],
                            quad: vec![(v, v, -inv_xs)],
                        },
                        ConstraintKind::QLower,
                        t,
                        Some(c),
                        Some(g),
                        false,
                    );
                    if c == cop {
                        bld.push(
                            linear(0.0, vec![(qg, 1.0), (l1, -1.0)]),
                            ConstraintKind::CopQUpperArmature,
                            t,
                            Some(c),
                            Some(g),
                            false,
                        );
                        bld.push(
                            linear(0.0, vec![(qg, 1.0), (l2, -1.0)]),
                            ConstraintKind::CopQUpperField,
                            t,
                            Some(c),
                            Some(g),
                            false,
                        );
                    }
                }

                // Ramps.
                if t > 0 {
                    for (g, gen) in case.generators.iter().enumerate() {
                        let (now, prev) = (lay.pg(t, c, g), lay.pg(t - 1, c, g));
                        bld.push(
                            linear(-gen.ramp_up, vec![(now, 1.0), (prev, -1.0)]),
                            ConstraintKind::RampUp,
                            t,
                            Some(c),
                            Some(g),
                            false,
                        );
                        bld.push(
                            linear(-gen.ramp_down, vec![(prev, 1.0), (now, -1.0)]),
                            ConstraintKind::RampDown,
                            t,
                            Some(c),
                            Some(g),
                            false,
                        );
                    }
                }

                // Branch ratings.
                for (k, br) in case.branches.iter().enumerate() {
                    if !br.in_service || !br.s_max.is_finite() {
                        continue;
                    }
                    let (yff, yft, ytf, ytt) = br.two_port();
                    let (vf, tf) = (lay.v(t, c, br.from_bus), lay.theta(t, c, br.from_bus));
                    let (vt, tt) = (lay.v(t, c, br.to_bus), lay.theta(t, c, br.to_bus));
                    let inv_s2 = 1.0 / (br.s_max * br.s_max);
                    let side = |vb, tb, vk, tk, yd: num_complex::Complex64, yx: num_complex::Complex64| {
                        Expr::BranchLimit {
                            p: Flow {
                                vb,
                                tb,
                                diag: yd.re,
                                terms: vec![(vk, tk, yx.re, yx.im)],
                            },
                            q: Flow {
                                vb,
                                tb,
                                diag: -yd.im,
                                terms: vec![(vk, tk, -yx.im, yx.re)],
                            },
                            inv_s2,
                        }
                    };
                    bld.push(side(vf, tf, vt, tt, yff, yft), ConstraintKind::BranchFlowFrom, t, Some(c), Some(k), false);
                    bld.push(side(vt, tt, vf, tf, ytt, ytf), ConstraintKind::BranchFlowTo, t, Some(c), Some(k), false);
                }
            }

            // Reserve and wind cap at the COP.
            if sc.enforce_reserve {
                let total_cap: f64 = case.generators.iter().map(|g| g.pg_max).sum();
                for (g, gen) in case.generators.iter().enumerate() {
                    let terms = (0..ng).map(|k| (lay.pg(t, cop, k), 1.0)).collect();
                    bld.push(
                        linear(-(total_cap - gen.pg_max), terms),
                        ConstraintKind::Reserve,
                        t,
                        Some(cop),
                        Some(g),
                        false,
                    );
                }
            }
            if nw > 0 {
                let total_pd: f64 = d.p.iter().sum();
                let terms = (0..nw).map(|w| (lay.pw(t, cop, w), 1.0)).collect();
                bld.push(linear(-sc.alpha * total_pd, terms), ConstraintKind::WindCap, t, Some(cop), None, false);
            }

            // SLP generator model.
            for (g, gen) in case.generators.iter().enumerate() {
                let qmax = lay.qmax(t, g);
                let (l1, l2) = (lay.l1(t, slp, g), lay.l2(t, slp, g));
                let (qg, pg) = (lay.qg(t, slp, g), lay.pg(t, slp, g));
                let yv = lay.y(t, g);
                let m1 = gen.big_m1;
                let slp_row = |kind| (kind, t, Some(slp), Some(g));
                let rows: [(Expr, (ConstraintKind, usize, Option<PointClass>, Option<usize>), bool); 6] = [
                    (linear(0.0, vec![(qg, 1.0), (qmax, -1.0)]), slp_row(ConstraintKind::SlpQCap), false),
                    (linear(0.0, vec![(qmax, 1.0), (l1, -1.0)]), slp_row(ConstraintKind::QCapArmature), false),
                    (linear(0.0, vec![(qmax, 1.0), (l2, -1.0)]), slp_row(ConstraintKind::QCapField), false),
                    (
                        linear(0.0, vec![(l1, 1.0), (yv, -m1), (qmax, -1.0)]),
                        slp_row(ConstraintKind::QCapArmatureSelect),
                        false,
                    ),
                    (
                        linear(-m1, vec![(l2, 1.0), (yv, m1), (qmax, -1.0)]),
                        slp_row(ConstraintKind::QCapFieldSelect),
                        false,
                    ),
                    (
                        linear(
                            0.0,
                            vec![
                                (lay.v(t, slp, gen.bus), 1.0),
                                (lay.v(t, cop, gen.bus), -1.0),
                                (lay.v_dn(t, g), -1.0),
                                (lay.v_up(t, g), 1.0),
                            ],
                        ),
                        slp_row(ConstraintKind::VoltageCoupling),
                        true,
                    ),
                ];
                for (expr, (kind, hour, point, element), eq) in rows {
                    bld.push(expr, kind, hour, point, element, eq);
                }
                let vup = lay.v_up(t, g);
                bld.push(
                    Expr::Poly {
                        constant: -sc.complementarity_eps,
                        linear: Vec::new(),
                        quad: vec![(qmax, vup, 1.0), (qg, vup, -1.0)],
                    },
                    ConstraintKind::ComplementarityUp,
                    t,
                    Some(slp),
                    Some(g),
                    false,
                );
                bld.push(
                    Expr::ComplementarityDown {
                        qg,
                        pg,
                        v: lay.v(t, slp, gen.bus),
                        vdn: lay.v_dn(t, g),
                        cot: cot(gen.delta_max),
                        inv_xs: 1.0 / gen.synchronous_reactance,
                        eps: sc.complementarity_eps,
                    },
                    ConstraintKind::ComplementarityDown,
                    t,
                    Some(slp),
                    Some(g),
                    false,
                );
                if g != slack {
                    let kg = growth.kg[g];
                    let pc = lay.pg(t, cop, g);
                    let zv = lay.z(t, g);
                    let m2 = gen.big_m2;
                    let scaled = |sign: f64| -> Vec<(usize, usize, f64)> {
                        if kg != 0.0 {
                            vec![(lam, pc, sign * kg)]
                        } else {
                            Vec::new()
                        }
                    };
                    bld.push(
                        Expr::Poly {
                            constant: 0.0,
                            linear: vec![(pg, 1.0), (pc, -1.0)],
                            quad: scaled(-1.0),
                        },
                        ConstraintKind::PgScaleUpper,
                        t,
                        Some(slp),
                        Some(g),
                        false,
                    );
                    bld.push(
                        Expr::Poly {
                            constant: 0.0,
                            linear: vec![(pc, 1.0), (zv, -m2), (pg, -1.0)],
                            quad: scaled(1.0),
                        },
                        ConstraintKind::PgScaleSelect,
                        t,
                        Some(slp),
                        Some(g),
                        false,
                    );
                    bld.push(
                        linear(gen.pg_max - m2, vec![(zv, m2), (pg, -1.0)]),
                        ConstraintKind::PgCapSelect,
                        t,
                        Some(slp),
                        Some(g),
                        false,
                    );
                }
            }

            // Wind and hydrogen carried from COP to SLP.
            for e in 0..ne {
                bld.push(
                    linear(0.0, vec![(lay.ph(t, slp, e), 1.0), (lay.ph(t, cop, e), -1.0)]),
                    ConstraintKind::HydrogenCoupling,
                    t,
                    Some(slp),
                    Some(e),
                    !sc.curtailable_electrolyzers,
                );
            }
            for w in 0..nw {
                bld.push(
                    linear(0.0, vec![(lay.pw(t, slp, w), 1.0), (lay.pw(t, cop, w), -1.0)]),
                    ConstraintKind::WindCoupling,
                    t,
                    Some(slp),
                    Some(w),
                    true,
                );
            }
        }
        bld.push(linear(-sc.lm_required, vec![(lam, 1.0)]), ConstraintKind::LoadingPin, 0, None, None, true);

        let mut binaries = Vec::new();
        let mut penalty_catalog = Vec::new();
        for t in 0..horizon {
            for g in 0..ng {
                binaries.push(lay.y(t, g));
                penalty_catalog.push(CatalogEntry {
                    kind: ConstraintKind::BinaryY,
                    hour: t,
                    point: None,
                    element: Some(g),
                    equality: true,
                });
            }
            for g in (0..ng).filter(|&g| g != slack) {
                binaries.push(lay.z(t, g));
                penalty_catalog.push(CatalogEntry {
                    kind: ConstraintKind::BinaryZ,
                    hour: t,
                    point: None,
                    element: Some(g),
                    equality: true,
                });
            }
        }

        // Derivative structures.
        let mut jac_offsets = Vec::with_capacity(bld.rows.len() + 1);
        let mut jac_structure = Vec::new();
        let mut hess_offsets = Vec::with_capacity(bld.rows.len() + 1);
        let mut hess_structure = Vec::new();
        let mut cols = Vec::new();
        let mut pairs = Vec::new();
        for (i, row) in bld.rows.iter().enumerate() {
            jac_offsets.push(jac_structure.len());
            hess_offsets.push(hess_structure.len());
            cols.clear();
            row.jac_cols(&mut cols);
            jac_structure.extend(cols.iter().map(|&j| (i, j)));
            pairs.clear();
            row.hess_pairs(&mut pairs);
            hess_structure.extend(pairs.iter().map(|&(a, b)| (a.max(b), a.min(b))));
        }
        jac_offsets.push(jac_structure.len());
        hess_offsets.push(hess_structure.len());

        let eta_ref = case
            .electrolyzers
            .iter()
            .map(|e| e.efficiency)
            .fold(0.0f64, f64::max);
        let weights = case.electrolyzers.iter().map(|e| e.efficiency / eta_ref).collect();
        debug!(
            "assembled {} variables, {} rows, {} jacobian and {} hessian entries",
            lay.n,
            bld.rows.len(),
            jac_structure.len(),
            hess_structure.len()
        );
        Ok(ModelInstance {
            case,
            scenario: sc.clone(),
            layout: lay,
            catalog: bld.catalog,
            penalty_catalog,
            demand,
            wind,
            admittance: y,
            rows: bld.rows,
            xl,
            xu,
            jac_offsets,
            jac_structure,
            hess_offsets,
            hess_structure,
            binaries,
            weights,
        })
    }

    /// Copy of the instance with a different complementarity relaxation.
    pub fn with_complementarity_eps(&self, eps: f64) -> ModelInstance {
        let mut out = self.clone();
        out.scenario.complementarity_eps = eps;
        for (row, e) in out.rows.iter_mut().zip(&out.catalog) {
            match (e.kind, row) {
                (ConstraintKind::ComplementarityUp, Expr::Poly { constant, .. }) => *constant = -eps,
                (ConstraintKind::ComplementarityDown, Expr::ComplementarityDown { eps: e, .. }) => *e = eps,
                _ => {}
            }
        }
        out
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn bounds(&self) -> (&[f64], &[f64]) {
        (&self.xl, &self.xu)
    }

    /// Total hydrogen (kg) at `x`.
    pub fn total_hydrogen(&self, x: &[f64]) -> f64 {
        let lay = &self.layout;
        let base = self.case.system_base;
        let mut th = 0.0;
        for t in 0..lay.horizon {
            for (e, el) in self.case.electrolyzers.iter().enumerate() {
                th += el.efficiency * x[lay.ph(t, PointClass::Cop, e)] * base;
            }
        }
        th
    }

    /// `TH` and its gradient (kg per pu of each variable).
    pub fn objective_eval(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let lay = &self.layout;
        let mut grad = vec![0.0; lay.n];
        for t in 0..lay.horizon {
            for (e, el) in self.case.electrolyzers.iter().enumerate() {
                grad[lay.ph(t, PointClass::Cop, e)] = el.efficiency * self.case.system_base;
            }
        }
        (self.total_hydrogen(x), grad)
    }

    /// Row residuals (equalities as `lhs − rhs`, inequalities as `g ≤ 0`) and
    /// Jacobian triplets.
    pub fn constraint_eval(&self, x: &[f64]) -> (Vec<f64>, Vec<(usize, usize, f64)>) {
        let mut c = vec![0.0; self.rows.len()];
        self.constraints(x, &mut c);
        let mut vals = vec![0.0; self.jac_structure.len()];
        self.jacobian_values(x, &mut vals);
        let trip = self.jac_structure.iter().zip(vals).map(|(&(i, j), v)| (i, j, v)).collect();
        (c, trip)
    }

    /// `y − y²` and `z − z²` for every relaxed binary, in penalty-catalog order.
    pub fn binary_residuals(&self, x: &[f64]) -> Vec<f64> {
        self.binaries.iter().map(|&j| x[j] - x[j] * x[j]).collect()
    }

    /// Largest violation over rows and variable bounds.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut c = vec![0.0; self.rows.len()];
        self.constraints(x, &mut c);
        let mut worst = 0.0f64;
        for (i, v) in c.iter().enumerate() {
            let viol = if self.catalog[i].equality { v.abs() } else { v.max(0.0) };
            worst = worst.max(viol);
        }
        for j in 0..x.len() {
            worst = worst.max(self.xl[j] - x[j]).max(x[j] - self.xu[j]);
        }
        worst
    }

    /// Row counts per constraint kind, penalty rows included.
    pub fn census(&self) -> std::collections::BTreeMap<ConstraintKind, usize> {
        let mut m = std::collections::BTreeMap::new();
        for e in self.catalog.iter().chain(&self.penalty_catalog) {
            *m.entry(e.kind).or_insert(0) += 1;
        }
        m
    }

    /// One line per row: `row,kind,hour,point,element,sense`.
    pub fn catalog_dump(&self) -> String {
        let mut out = String::from("row,kind,hour,point,element,sense,role\n");
        for (i, e) in self.catalog.iter().chain(&self.penalty_catalog).enumerate() {
            let sense = if e.equality { "eq" } else { "le" };
            let role = if e.kind.is_penalty() {
                "penalty"
            } else if e.kind.is_plumbing() {
                "plumbing"
            } else {
                "model"
            };
            let _ = writeln!(
                out,
                "{i},{},{},{},{},{sense},{role}",
                e.kind.name(),
                e.hour + 1,
                e.point.map(|p| p.as_str()).unwrap_or("-"),
                e.element.map(|k| k.to_string()).unwrap_or_else(|| "-".into()),
            );
        }
        out
    }

    /// Write a solved power-flow state into the `(t, c)` block of `x`.
    pub fn embed_point(&self, x: &mut [f64], t: usize, c: PointClass, p: &OperatingPoint) {
        let lay = &self.layout;
        for b in 0..lay.nb {
            x[lay.v(t, c, b)] = p.v[b];
            x[lay.theta(t, c, b)] = p.theta[b];
        }
        for (g, gen) in self.case.generators.iter().enumerate() {
            x[lay.pg(t, c, g)] = p.pg[g];
            x[lay.qg(t, c, g)] = p.qg[g];
            let v = p.v[gen.bus];
            let a = (v * gen.stator_current_max).powi(2) - p.pg[g].powi(2);
            x[lay.l1(t, c, g)] = a.max(0.0).sqrt();
            let k = v * gen.internal_emf / gen.synchronous_reactance;
            x[lay.l2(t, c, g)] = (k * k - p.pg[g].powi(2)).max(0.0).sqrt() - v * v / gen.synchronous_reactance;
        }
        for w in 0..lay.nw {
            x[lay.pw(t, c, w)] = p.pw[w];
            x[lay.qw(t, c, w)] = p.qw[w];
        }
        for e in 0..lay.ne {
            x[lay.ph(t, c, e)] = p.ph[e];
            x[lay.qh(t, c, e)] = p.qh[e];
        }
    }

    /// Read the `(t, c)` block of `x` as an operating point.
    pub fn point(&self, x: &[f64], t: usize, c: PointClass) -> OperatingPoint {
        let lay = &self.layout;
        OperatingPoint {
            v: (0..lay.nb).map(|b| x[lay.v(t, c, b)]).collect(),
            theta: (0..lay.nb).map(|b| x[lay.theta(t, c, b)]).collect(),
            pg: (0..lay.ng).map(|g| x[lay.pg(t, c, g)]).collect(),
            qg: (0..lay.ng).map(|g| x[lay.qg(t, c, g)]).collect(),
            pw: (0..lay.nw).map(|w| x[lay.pw(t, c, w)]).collect(),
            qw: (0..lay.nw).map(|w| x[lay.qw(t, c, w)]).collect(),
            ph: (0..lay.ne).map(|e| x[lay.ph(t, c, e)]).collect(),
            qh: (0..lay.ne).map(|e| x[lay.qh(t, c, e)]).collect(),
            point_class: c,
            hour: t,
        }
    }

    /// Demand at the SLP of hour `t` for a loading parameter `lambda`.
    pub fn slp_demand(&self, t: usize, lambda: f64) -> NodalDemand {
        let d = &self.demand[t];
        let g = Growth::from_case(&self.case);
        NodalDemand {
            p: (0..self.layout.nb).map(|b| (1.0 + g.kp[b] * lambda) * d.p[b]).collect(),
            q: (0..self.layout.nb).map(|b| (1.0 + g.kq[b] * lambda) * d.q[b]).collect(),
        }
    }

    /// Fill the hour-level auxiliaries (`qmax`, `v_up`, `v_dn`) consistent
    /// with the COP and SLP blocks already in `x`, and set `y`, `z`.
    fn fill_auxiliaries(&self, x: &mut [f64], binaries_from_state: bool) {
        let lay = &self.layout;
        let slack = self.case.slack_generator();
        for t in 0..lay.horizon {
            for (g, gen) in self.case.generators.iter().enumerate() {
                let (l1, l2) = (x[lay.l1(t, PointClass::Slp, g)], x[lay.l2(t, PointClass::Slp, g)]);
                x[lay.qmax(t, g)] = l1.min(l2);
                let dv = x[lay.v(t, PointClass::Slp, gen.bus)] - x[lay.v(t, PointClass::Cop, gen.bus)];
                x[lay.v_dn(t, g)] = dv.max(0.0);
                x[lay.v_up(t, g)] = (-dv).max(0.0);
                if binaries_from_state {
                    x[lay.y(t, g)] = if l2 <= l1 { 1.0 } else { 0.0 };
                    if g != slack {
                        // Read off the SLP output rather than the scaled COP
                        // output: a unit held below its cap by the network
                        // has to follow the growth direction.
                        let pg = x[lay.pg(t, PointClass::Slp, g)];
                        x[lay.z(t, g)] = if pg >= gen.pg_max - AT_CAP_TOLERANCE { 1.0 } else { 0.0 };
                    }
                } else {
                    x[lay.y(t, g)] = 0.5;
                    if g != slack {
                        x[lay.z(t, g)] = 0.5;
                    }
                }
                if g == slack {
                    x[lay.z(t, g)] = 0.0;
                }
            }
        }
    }

    /// Starting point: a solved power flow per hour and point class where
    /// one exists, a flat profile otherwise.
    pub fn initial_point(&self) -> Vec<f64> {
        let lay = &self.layout;
        let case = &self.case;
        let sc = &self.scenario;
        let mut x = vec![0.0; lay.n];
        let lambda = sc.lm_required;
        x[lay.lambda()] = lambda;
        let growth = Growth::from_case(case);
        let slack = case.slack_generator();
        let cap_total: f64 = case.generators.iter().map(|g| g.pg_max).sum();
        for t in 0..lay.horizon {
            let d = &self.demand[t];
            let pd: f64 = d.p.iter().sum();
            let pw: Vec<f64> = self.wind[t]
                .iter()
                .map(|&a| a.min(0.99 * sc.alpha * pd / lay.nw.max(1) as f64))
                .collect();
            let ph: Vec<f64> = case
                .electrolyzers
                .iter()
                .map(|e| (0.5 * (e.ph_min + e.ph_max)).min(0.1 * pd / lay.ne as f64).max(e.ph_min))
                .collect();
            let need = (pd + ph.iter().sum::<f64>() - pw.iter().sum::<f64>()) * 1.01;
            let pg: Vec<f64> = case
                .generators
                .iter()
                .map(|g| (g.pg_max * need / cap_total).clamp(g.pg_min, g.pg_max))
                .collect();
            let v_set: Vec<f64> = case
                .generators
                .iter()
                .map(|g| g.v_setpoint.clamp(case.buses[g.bus].v_min, case.buses[g.bus].v_max))
                .collect();
            let cop = Dispatch {
                pg: pg.clone(),
                v_set: v_set.clone(),
                pw: pw.clone(),
                qw: vec![0.0; lay.nw],
                ph: ph.clone(),
                qh: vec![0.0; lay.ne],
                demand: d.clone(),
                hour: t,
            };
            let flat = |c: PointClass, pg: &[f64], demand: &NodalDemand| OperatingPoint {
                v: (0..lay.nb)
                    .map(|b| 1.0f64.clamp(case.buses[b].v_min, case.buses[b].v_max))
                    .collect(),
                theta: vec![0.0; lay.nb],
                pg: pg.to_vec(),
                qg: vec![0.0; lay.ng],
                pw: pw.clone(),
                qw: vec![0.0; lay.nw],
                ph: ph.clone(),
                qh: vec![0.0; lay.ne],
                point_class: c,
                hour: t,
            }
            .with_demand_hint(demand);
            let opts = PowerFlowOptions::default();
            let cop_point = match newton_solve(case, &self.admittance, &cop, &opts) {
                Ok(r) => r.point,
                Err(e) => {
                    debug!("hour {}: COP start falls back to flat ({e})", t + 1);
                    flat(PointClass::Cop, &pg, d)
                }
            };
            let mut cop_point = cop_point;
            cop_point.point_class = PointClass::Cop;
            self.embed_point(&mut x, t, PointClass::Cop, &cop_point);

            let slp_pg: Vec<f64> = (0..lay.ng)
                .map(|g| {
                    if g == slack {
                        cop_point.pg[g]
                    } else {
                        ((1.0 + growth.kg[g] * lambda) * cop_point.pg[g]).min(case.generators[g].pg_max)
                    }
                })
                .collect();
            let slp_demand = self.slp_demand(t, lambda);
            let slp = Dispatch {
                pg: slp_pg.clone(),
                demand: slp_demand.clone(),
                ..cop
            };
            let start = PowerFlowOptions {
                start: Some((cop_point.v.clone(), cop_point.theta.clone())),
                ..PowerFlowOptions::default()
            };
            let mut slp_point = match newton_solve(case, &self.admittance, &slp, &start) {
                Ok(r) => r.point,
                Err(e) => {
                    debug!("hour {}: SLP start copies the COP ({e})", t + 1);
                    let mut p = cop_point.clone();
                    p.pg = slp_pg;
                    p
                }
            };
            slp_point.point_class = PointClass::Slp;
            self.embed_point(&mut x, t, PointClass::Slp, &slp_point);
        }
        self.fill_auxiliaries(&mut x, false);
        for j in 0..lay.n {
            if self.xl[j] == self.xu[j] {
                x[j] = self.xl[j];
            }
        }
        x
    }

    /// Binary values implied by the continuous part of `x`.
    pub fn implied_binaries(&self, x: &[f64]) -> Vec<f64> {
        let mut xx = x.to_vec();
        self.fill_auxiliaries(&mut xx, true);
        self.binaries.iter().map(|&j| xx[j]).collect()
    }

    /// Per-hour COP dispatch used by the power-flow oracle.
    pub fn cop_dispatch(&self, x: &[f64], t: usize) -> Dispatch {
        let p = self.point(x, t, PointClass::Cop);
        Dispatch {
            v_set: self.case.generators.iter().map(|g| p.v[g.bus]).collect(),
            pg: p.pg,
            pw: p.pw,
            qw: p.qw,
            ph: p.ph,
            qh: p.qh,
            demand: self.demand[t].clone(),
            hour: t,
        }
    }

    /// Largest relaxed complementarity product over all hours and machines.
    pub fn complementarity_residual(&self, x: &[f64]) -> f64 {
        let lay = &self.layout;
        let mut worst = 0.0f64;
        for t in 0..lay.horizon {
            for (g, gen) in self.case.generators.iter().enumerate() {
                let qg = x[lay.qg(t, PointClass::Slp, g)];
                let up = (x[lay.qmax(t, g)] - qg) * x[lay.v_up(t, g)];
                let v = x[lay.v(t, PointClass::Slp, gen.bus)];
                let qmin = x[lay.pg(t, PointClass::Slp, g)] * cot(gen.delta_max) - v * v / gen.synchronous_reactance;
                let dn = (qg - qmin) * x[lay.v_dn(t, g)];
                worst = worst.max(up.abs()).max(dn.abs());
            }
        }
        worst
    }
}

trait DemandHint {
    fn with_demand_hint(self, d: &NodalDemand) -> Self;
}

impl DemandHint for OperatingPoint {
    /// Flat points carry the demand-side reactive balance on the machines.
    fn with_demand_hint(mut self, d: &NodalDemand) -> Self {
        let total: f64 = d.q.iter().sum();
        let n = self.qg.len().max(1) as f64;
        for q in &mut self.qg {
            *q = total / n;
        }
        self
    }
}

impl NlpProblem for ModelInstance {
    fn num_variables(&self) -> usize {
        self.layout.n
    }

    fn num_constraints(&self) -> usize {
        self.rows.len()
    }

    fn variable_bounds(&self, lower: &mut [f64], upper: &mut [f64]) {
        lower.copy_from_slice(&self.xl);
        upper.copy_from_slice(&self.xu);
    }

    fn constraint_bounds(&self, lower: &mut [f64], upper: &mut [f64]) {
        for (i, e) in self.catalog.iter().enumerate() {
            upper[i] = 0.0;
            lower[i] = if e.equality { 0.0 } else { f64::NEG_INFINITY };
        }
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let lay = &self.layout;
        let mut f = 0.0;
        for t in 0..lay.horizon {
            for e in 0..lay.ne {
                f -= self.weights[e] * x[lay.ph(t, PointClass::Cop, e)];
            }
        }
        f
    }

    fn objective_gradient(&self, _x: &[f64], grad: &mut [f64]) {
        let lay = &self.layout;
        grad.fill(0.0);
        for t in 0..lay.horizon {
            for e in 0..lay.ne {
                grad[lay.ph(t, PointClass::Cop, e)] = -self.weights[e];
            }
        }
    }

    fn constraints(&self, x: &[f64], c: &mut [f64]) {
        for (i, row) in self.rows.iter().enumerate() {
            c[i] = row.value(x);
        }
    }

    fn jacobian_structure(&self) -> Vec<(usize, usize)> {
        self.jac_structure.clone()
    }

    fn jacobian_values(&self, x: &[f64], values: &mut [f64]) {
        let mut buf = Vec::with_capacity(64);
        for (i, row) in self.rows.iter().enumerate() {
            buf.clear();
            row.jac_vals(x, &mut buf);
            values[self.jac_offsets[i]..self.jac_offsets[i + 1]].copy_from_slice(&buf);
        }
    }

    fn hessian_structure(&self) -> Vec<(usize, usize)> {
        self.hess_structure.clone()
    }

    fn hessian_values(&self, x: &[f64], _obj_factor: f64, multipliers: &[f64], values: &mut [f64]) {
        let mut buf = Vec::with_capacity(128);
        for (i, row) in self.rows.iter().enumerate() {
            let (a, b) = (self.hess_offsets[i], self.hess_offsets[i + 1]);
            if a == b {
                continue;
            }
            if multipliers[i] == 0.0 {
                values[a..b].fill(0.0);
                continue;
            }
            buf.clear();
            row.hess_vals(x, multipliers[i], &mut buf);
            values[a..b].copy_from_slice(&buf);
        }
    }

    fn binary_variables(&self) -> Vec<usize> {
        self.binaries.clone()
    }

    fn repair_binaries(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(self.implied_binaries(x))
    }
}

// ---------------------------------------------------------------------------
// Solutions

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    /// External bus number.
    pub bus: i64,
    pub size_mw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourlyCheck {
    pub hour: usize,
    /// Nodal mismatch of the state reported by the optimizer.
    pub reported_mismatch: f64,
    /// Mismatch of the COP re-solved by Newton from the reported dispatch.
    pub newton_mismatch: Option<f64>,
    /// Largest voltage gap between the reported and the re-solved COP.
    pub voltage_gap: Option<f64>,
    /// Loading margin certified by the continuation power flow.
    pub oracle_lm: Option<f64>,
    pub stop: String,
    /// Set when the continuation stopped on a bus voltage bound.
    #[serde(default)]
    pub voltage_limit: Option<VoltageLimitHit>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoltageLimitHit {
    /// Internal bus index.
    pub bus: usize,
    pub upper: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarvestSolution {
    pub case_name: String,
    pub alpha: f64,
    pub lm_required: f64,
    pub mode: Mode,
    pub horizon: usize,
    pub status: String,
    pub converged: bool,
    pub total_hydrogen: f64,
    /// kg/h per electrolyzer (outer) and hour (inner).
    pub hydrogen_schedule: Vec<Vec<f64>>,
    /// Electrolyzer buses (external numbers) matching `hydrogen_schedule`.
    pub electrolyzer_buses: Vec<i64>,
    pub p2h_sizing: Vec<Allocation>,
    /// COP and SLP state of every hour.
    pub dispatch: Vec<[OperatingPoint; 2]>,
    pub lambda_achieved: f64,
    pub kkt_residual: f64,
    pub violation: f64,
    pub complementarity_residual: f64,
    pub integrality_gap: f64,
    pub iterations: usize,
    pub wall_time_s: f64,
    pub checks: Vec<HourlyCheck>,
    /// Raw decision vector, kept for warm starts and audits.
    pub x: Vec<f64>,
}

impl HarvestSolution {
    /// Total electrolyzer demand per hour (MW).
    pub fn hourly_p2h_mw(&self, base: f64) -> Vec<f64> {
        self.dispatch
            .iter()
            .map(|pts| pts[0].ph.iter().sum::<f64>() * base)
            .collect()
    }
}

/// Re-solve each hour's COP with Newton from the reported dispatch and trace
/// its margin with the continuation power flow.
pub fn oracle_checks(inst: &ModelInstance, dispatch: &[[OperatingPoint; 2]]) -> Vec<HourlyCheck> {
    let case = &inst.case;
    let growth = Growth::from_case(case);
    dispatch
        .iter()
        .enumerate()
        .map(|(t, pts)| {
            let cop = &pts[0];
            let reported = max_mismatch(case, &inst.admittance, cop, &inst.demand[t]);
            let d = Dispatch {
                v_set: case.generators.iter().map(|g| cop.v[g.bus]).collect(),
                pg: cop.pg.clone(),
                pw: cop.pw.clone(),
                qw: cop.qw.clone(),
                ph: cop.ph.clone(),
                qh: cop.qh.clone(),
                demand: inst.demand[t].clone(),
                hour: t,
            };
            let pf_opts = PowerFlowOptions {
                start: Some((cop.v.clone(), cop.theta.clone())),
                ..PowerFlowOptions::default()
            };
            let mut check = HourlyCheck {
                hour: t + 1,
                reported_mismatch: reported,
                newton_mismatch: None,
                voltage_gap: None,
                oracle_lm: None,
                stop: String::new(),
                voltage_limit: None,
            };
            let pf = match newton_solve(case, &inst.admittance, &d, &pf_opts) {
                Ok(pf) => pf,
                Err(e) => {
                    check.stop = format!("newton: {e}");
                    return check;
                }
            };
            check.newton_mismatch = Some(max_mismatch(case, &inst.admittance, &pf.point, &inst.demand[t]));
            check.voltage_gap = Some(pf.point.v.iter().zip(&cop.v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            let opts = CpfOptions {
                start: Some((pf.point.v.clone(), pf.point.theta.clone())),
                ..CpfOptions::default()
            };
            match cpf_loading_margin(case, &inst.admittance, &d, &growth, &opts) {
                Ok(curve) => {
                    check.oracle_lm = Some(curve.lambda_max);
                    check.stop = stop_name(&curve.stop, case);
                    if let (StopReason::VoltageLimit { bus }, Some(last)) = (&curve.stop, curve.samples.last()) {
                        let mid = 0.5 * (case.buses[*bus].v_min + case.buses[*bus].v_max);
                        check.voltage_limit = Some(VoltageLimitHit {
                            bus: *bus,
                            upper: last.v[*bus] > mid,
                        });
                    }
                }
                Err(e) => check.stop = format!("cpf: {e}"),
            }
            check
        })
        .collect()
}

fn stop_name(stop: &StopReason, case: &NetworkCase) -> String {
    match *stop {
        StopReason::NosePoint => "nose".into(),
        StopReason::VoltageLimit { bus } => format!("voltage@bus{}", case.buses[bus].id),
        StopReason::BranchLimit { branch } => {
            let br = &case.branches[branch];
            format!("flow@{}-{}", case.buses[br.from_bus].id, case.buses[br.to_bus].id)
        }
        StopReason::CapabilityLimit { generator } => {
            format!("capability@bus{}", case.buses[case.generators[generator].bus].id)
        }
        StopReason::Unbounded => "unbounded".into(),
        StopReason::LambdaCap => "lambda-cap".into(),
        StopReason::StepFloor => "step-floor".into(),
    }
}

/// Interpret a solver report.
pub fn extract_solution(inst: &ModelInstance, report: &SolveReport, with_oracle: bool) -> HarvestSolution {
    let x = &report.x;
    let lay = &inst.layout;
    let case = &inst.case;
    let base = case.system_base;
    let mut schedule = vec![vec![0.0; lay.horizon]; lay.ne];
    for t in 0..lay.horizon {
        for (e, el) in case.electrolyzers.iter().enumerate() {
            schedule[e][t] = el.efficiency * x[lay.ph(t, PointClass::Cop, e)] * base;
        }
    }
    let mut sizes: Vec<(i64, f64)> = Vec::new();
    for (e, el) in case.electrolyzers.iter().enumerate() {
        let peak = (0..lay.horizon)
            .map(|t| x[lay.ph(t, PointClass::Cop, e)])
            .fold(0.0f64, f64::max)
            * base;
        let id = case.buses[el.bus].id;
        match sizes.iter_mut().find(|s| s.0 == id) {
            Some(s) => s.1 += peak,
            None => sizes.push((id, peak)),
        }
    }
    let p2h_sizing = sizes
        .into_iter()
        .filter(|s| s.1 >= inst.scenario.size_epsilon_mw)
        .map(|(bus, size_mw)| Allocation { bus, size_mw })
        .collect();
    let dispatch: Vec<[OperatingPoint; 2]> = (0..lay.horizon)
        .map(|t| [inst.point(x, t, PointClass::Cop), inst.point(x, t, PointClass::Slp)])
        .collect();
    let checks = if with_oracle { oracle_checks(inst, &dispatch) } else { Vec::new() };
    HarvestSolution {
        case_name: case.name.clone(),
        alpha: inst.scenario.alpha,
        lm_required: inst.scenario.lm_required,
        mode: inst.scenario.mode,
        horizon: inst.layout.horizon,
        status: report.status.as_str().to_string(),
        converged: report.status.is_success(),
        total_hydrogen: inst.total_hydrogen(x),
        hydrogen_schedule: schedule,
        electrolyzer_buses: case.electrolyzers.iter().map(|e| case.buses[e.bus].id).collect(),
        p2h_sizing,
        dispatch,
        lambda_achieved: x[lay.lambda()],
        kkt_residual: report.kkt_residual,
        violation: inst.max_violation(x),
        complementarity_residual: inst.complementarity_residual(x),
        integrality_gap: report.final_integrality_gap,
        iterations: report.iterations,
        wall_time_s: report.wall_time.as_secs_f64(),
        checks,
        x: x.clone(),
    }
}

/// Complementarity relaxation used for the first solve; later stages
/// tighten it to the scenario value.
/// Distance below `pg_max` (pu) at which an SLP unit counts as capped.
const AT_CAP_TOLERANCE: f64 = 1e-4;

pub const LOOSE_COMPLEMENTARITY: f64 = 1e-5;

/// Solve an assembled instance from `start` (or its own initial point).
pub fn solve_instance(inst: &ModelInstance, opts: &SolverOptions, start: Option<&[f64]>) -> Result<SolveReport, OpfError> {
    let x0 = match start {
        Some(s) if s.len() == inst.layout.n => {
            let mut x = s.to_vec();
            x[inst.layout.lambda()] = inst.scenario.lm_required;
            x
        }
        _ => inst.initial_point(),
    };
    let target = inst.scenario.complementarity_eps;
    let first = if target < LOOSE_COMPLEMENTARITY {
        inst.with_complementarity_eps(LOOSE_COMPLEMENTARITY)
    } else {
        inst.clone()
    };
    let mut report = if opts.multi_start > 1 {
        h2margin_nlp::multi_start(&first, &x0, opts)?
    } else {
        h2margin_nlp::solve(&first, &x0, opts)?
    };
    let mut iterations = report.iterations;
    let mut eps = first.scenario.complementarity_eps;
    // Tighten the complementarity relaxation with the switch pattern fixed.
    while eps > target && report.status.is_success() {
        eps = if eps * 0.1 <= target * (1.0 + 1e-9) { target } else { eps * 0.1 };
        let stage = if eps == target {
            inst.clone()
        } else {
            inst.with_complementarity_eps(eps)
        };
        let next = h2margin_nlp::resolve_fixed(&stage, &report, opts)?;
        iterations += next.iterations;
        debug!("complementarity {eps:.0e}: {} after {} iterations", next.status, next.iterations);
        report = next;
    }
    report.iterations = iterations;
    debug!(
        "solve finished: {} TH {:.1} kg, violation {:.2e}, {} iterations",
        report.status,
        inst.total_hydrogen(&report.x),
        report.violation,
        report.iterations,
    );
    Ok(report)
}

/// Generator envelope check used by audits: returns the worst amount by
/// which any machine exceeds its reactive envelope at the COP.
pub fn envelope_excess(inst: &ModelInstance, x: &[f64]) -> f64 {
    let lay = &inst.layout;
    let mut worst = 0.0f64;
    for t in 0..lay.horizon {
        for (g, gen) in inst.case.generators.iter().enumerate() {
            let pg = x[lay.pg(t, PointClass::Cop, g)];
            let v = x[lay.v(t, PointClass::Cop, gen.bus)];
            let q = x[lay.qg(t, PointClass::Cop, g)];
            if let Ok(env) = q_envelope(pg, v, gen) {
                worst = worst.max(q - env.q_max).max(env.q_min - q);
            }
        }
    }
    worst
}
