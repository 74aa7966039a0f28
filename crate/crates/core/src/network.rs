//! Static grid description, case and profile files, per-unit conversion and
//! the bus admittance matrix.
//!
//! Case files are TOML with MW/MVAr/MVA quantities and external bus numbers.
//! Everything in [`NetworkCase`] is per unit on the system base with buses
//! addressed by position.

use std::collections::{HashMap, VecDeque};
use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

pub const CASE_FORMAT: &str = "h2margin-case";
pub const CASE_VERSION: u32 = 1;

const IEEE39_TOML: &str = include_str!("../../../data/case39.toml");
const PROFILE24_CSV: &str = include_str!("../../../data/profile24.csv");

#[derive(Debug, thiserror::Error)]
pub enum CaseError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{path}: unknown bus {bus}")]
    UnknownBus { path: String, bus: String },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("network is disconnected: bus {bus} cannot be reached from bus {root}")]
    Disconnected { root: i64, bus: i64 },
    #[error("base-case {quantity} demand is zero but the profile asks for {requested}")]
    ZeroBaseDemand { quantity: &'static str, requested: f64 },
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> CaseError {
    CaseError::Invalid {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BusRecord {
    /// External bus number as written in the case file.
    pub id: i64,
    pub base_demand_p: f64,
    pub base_demand_q: f64,
    pub shunt_g: f64,
    pub shunt_b: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub kp: f64,
    pub kq: f64,
    pub kg: f64,
    /// Initial voltage magnitude and angle (rad) for power-flow starts.
    pub v_init: f64,
    pub theta_init: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchRecord {
    pub from_bus: usize,
    pub to_bus: usize,
    pub r: f64,
    pub x: f64,
    /// Total line-charging susceptance.
    pub b: f64,
    /// Off-nominal turns ratio on the from side.
    pub tap: f64,
    /// Apparent-flow limit; `f64::INFINITY` when unrated.
    pub s_max: f64,
    pub in_service: bool,
}

impl BranchRecord {
    pub fn series_admittance(&self) -> Complex64 {
        Complex64::new(1.0, 0.0) / Complex64::new(self.r, self.x)
    }

    pub fn shunt_susceptance(&self) -> f64 {
        self.b
    }

    /// Two-port admittances `(y_ff, y_ft, y_tf, y_tt)` of the pi model.
    pub fn two_port(&self) -> (Complex64, Complex64, Complex64, Complex64) {
        if !self.in_service {
            let z = Complex64::new(0.0, 0.0);
            return (z, z, z, z);
        }
        let ys = self.series_admittance();
        let ysh = Complex64::new(0.0, self.b / 2.0);
        let t = self.tap;
        let ytt = ys + ysh;
        let yff = ytt / (t * t);
        let yft = -ys / t;
        (yff, yft, yft, ytt)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorRecord {
    pub bus: usize,
    pub pg_min: f64,
    pub pg_max: f64,
    pub ramp_up: f64,
    pub ramp_down: f64,
    /// Internal EMF, identical on machine and system base.
    pub internal_emf: f64,
    /// Synchronous reactance on the system base.
    pub synchronous_reactance: f64,
    /// Stator current limit on the system base.
    pub stator_current_max: f64,
    pub delta_max: f64,
    pub machine_base: f64,
    pub is_slack: bool,
    pub big_m1: f64,
    pub big_m2: f64,
    pub pg_init: f64,
    pub v_setpoint: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindFarmRecord {
    pub bus: usize,
    pub capacity: f64,
    pub qw_min: f64,
    pub qw_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElectrolyzerRecord {
    pub bus: usize,
    pub ph_min: f64,
    pub ph_max: f64,
    pub qh_min: f64,
    pub qh_max: f64,
    /// Hydrogen yield in kg/MWh.
    pub efficiency: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkCase {
    pub name: String,
    pub system_base: f64,
    pub buses: Vec<BusRecord>,
    pub branches: Vec<BranchRecord>,
    pub generators: Vec<GeneratorRecord>,
    pub wind_farms: Vec<WindFarmRecord>,
    pub electrolyzers: Vec<ElectrolyzerRecord>,
}

impl NetworkCase {
    pub fn num_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn bus_index(&self, id: i64) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn slack_generator(&self) -> usize {
        self.generators
            .iter()
            .position(|g| g.is_slack)
            .expect("validated case has a slack generator")
    }

    pub fn slack_bus(&self) -> usize {
        self.generators[self.slack_generator()].bus
    }

    /// Generator index at each bus, if any.
    pub fn generator_at_bus(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.buses.len()];
        for (k, g) in self.generators.iter().enumerate() {
            out[g.bus] = Some(k);
        }
        out
    }

    pub fn base_total_demand(&self) -> (f64, f64) {
        let p = self.buses.iter().map(|b| b.base_demand_p).sum();
        let q = self.buses.iter().map(|b| b.base_demand_q).sum();
        (p, q)
    }

    /// Same network with the electrolyzer set replaced.
    pub fn with_electrolyzers(&self, electrolyzers: Vec<ElectrolyzerRecord>) -> NetworkCase {
        NetworkCase {
            electrolyzers,
            ..self.clone()
        }
    }

    /// Check every invariant of the data model.
    pub fn validate(&self) -> Result<(), CaseError> {
        let nb = self.buses.len();
        if !(self.system_base > 0.0) {
            return Err(invalid("base_mva", "must be positive"));
        }
        if nb == 0 {
            return Err(invalid("bus", "case has no buses"));
        }
        let mut seen = HashMap::new();
        for (i, b) in self.buses.iter().enumerate() {
            let path = format!("bus[{i}]");
            if seen.insert(b.id, i).is_some() {
                return Err(invalid(format!("{path}.id"), format!("duplicate bus id {}", b.id)));
            }
            if !(b.v_min > 0.0 && b.v_min < b.v_max) {
                return Err(invalid(path, format!("need 0 < vmin < vmax, got {} and {}", b.v_min, b.v_max)));
            }
            for (name, v) in [("kp", b.kp), ("kq", b.kq), ("kg", b.kg)] {
                if !(v >= 0.0) {
                    return Err(invalid(format!("{path}.{name}"), "must be non-negative"));
                }
            }
        }
        for (i, br) in self.branches.iter().enumerate() {
            let path = format!("branch[{i}]");
            if br.from_bus >= nb || br.to_bus >= nb {
                return Err(CaseError::UnknownBus { path, bus: "(index out of range)".into() });
            }
            if br.from_bus == br.to_bus {
                return Err(invalid(path, "from and to bus coincide"));
            }
            if !(br.s_max > 0.0) {
                return Err(invalid(format!("{path}.rate_a"), "limit must be positive"));
            }
            if br.r == 0.0 && br.x == 0.0 {
                return Err(invalid(path, "zero impedance"));
            }
            if !(br.tap > 0.0) {
                return Err(invalid(format!("{path}.tap"), "must be positive"));
            }
        }
        let mut slack = 0;
        let mut gen_bus = vec![false; nb];
        for (i, g) in self.generators.iter().enumerate() {
            let path = format!("gen[{i}]");
            if g.bus >= nb {
                return Err(CaseError::UnknownBus { path, bus: "(index out of range)".into() });
            }
            if gen_bus[g.bus] {
                return Err(invalid(path, format!("second generator at bus {}", self.buses[g.bus].id)));
            }
            gen_bus[g.bus] = true;
            if g.is_slack {
                slack += 1;
            }
            if g.pg_min > g.pg_max {
                return Err(invalid(path, "pmin exceeds pmax"));
            }
            if !(g.internal_emf > self.buses[g.bus].v_max) {
                return Err(invalid(format!("{path}.emf"), "internal EMF must exceed the bus vmax"));
            }
            if !(g.synchronous_reactance > 0.0) || !(g.stator_current_max > 0.0) {
                return Err(invalid(path, "reactance and stator limit must be positive"));
            }
            if !(g.delta_max > 0.0 && g.delta_max <= FRAC_PI_2 + 1e-12) {
                return Err(invalid(format!("{path}.delta_max"), "must lie in (0, 90] degrees"));
            }
            if !(g.big_m1 > 0.0 && g.big_m2 > 0.0) {
                return Err(invalid(path, "big-M constants must be positive"));
            }
            if !(g.machine_base > 0.0) {
                return Err(invalid(format!("{path}.mbase"), "must be positive"));
            }
            if g.ramp_up < 0.0 || g.ramp_down < 0.0 {
                return Err(invalid(path, "ramp limits must be non-negative"));
            }
        }
        if slack != 1 {
            return Err(invalid("gen", format!("exactly one slack generator required, found {slack}")));
        }
        for (i, w) in self.wind_farms.iter().enumerate() {
            let path = format!("wind[{i}]");
            if w.bus >= nb {
                return Err(CaseError::UnknownBus { path, bus: "(index out of range)".into() });
            }
            if !(w.capacity > 0.0) {
                return Err(invalid(format!("{path}.capacity"), "must be positive"));
            }
            if w.qw_min > w.qw_max {
                return Err(invalid(path, "qmin exceeds qmax"));
            }
        }
        for (i, e) in self.electrolyzers.iter().enumerate() {
            let path = format!("electrolyzer[{i}]");
            if e.bus >= nb {
                return Err(CaseError::UnknownBus { path, bus: "(index out of range)".into() });
            }
            if !(e.ph_min >= 0.0 && e.ph_min <= e.ph_max) {
                return Err(invalid(path, "need 0 <= ph_min <= ph_max"));
            }
            if e.qh_min > e.qh_max {
                return Err(invalid(path, "qh_min exceeds qh_max"));
            }
            if !(e.efficiency > 0.0) {
                return Err(invalid(format!("{path}.efficiency"), "must be positive"));
            }
        }
        self.check_connected()
    }

    fn check_connected(&self) -> Result<(), CaseError> {
        let nb = self.buses.len();
        let mut adj = vec![Vec::new(); nb];
        for br in self.branches.iter().filter(|b| b.in_service) {
            adj[br.from_bus].push(br.to_bus);
            adj[br.to_bus].push(br.from_bus);
        }
        let mut seen = vec![false; nb];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(b) = queue.pop_front() {
            for &k in &adj[b] {
                if !seen[k] {
                    seen[k] = true;
                    queue.push_back(k);
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(k) => Err(CaseError::Disconnected {
                root: self.buses[0].id,
                bus: self.buses[k].id,
            }),
            None => Ok(()),
        }
    }
}

// ---------------------------------------------------------------------------
// File schema

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseFile {
    format: String,
    version: u32,
    name: String,
    base_mva: f64,
    #[serde(default)]
    bus: Vec<BusEntry>,
    #[serde(default)]
    branch: Vec<BranchEntry>,
    #[serde(default)]
    gen: Vec<GenEntry>,
    #[serde(default)]
    wind: Vec<WindEntry>,
    #[serde(default)]
    electrolyzer: Vec<ElectrolyzerEntry>,
}

fn one() -> f64 {
    1.0
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

fn is_one(v: &f64) -> bool {
    *v == 1.0
}

fn is_true(v: &bool) -> bool {
    *v
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BusEntry {
    id: i64,
    pd: f64,
    qd: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    gs: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    bs: f64,
    vmin: f64,
    vmax: f64,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    kp: f64,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    kq: f64,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    kg: f64,
    #[serde(default = "one")]
    vm0: f64,
    /// Degrees.
    #[serde(default)]
    va0: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BranchEntry {
    from: i64,
    to: i64,
    r: f64,
    x: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    b: f64,
    /// MVA; zero means unrated.
    #[serde(default)]
    rate_a: f64,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    tap: f64,
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    in_service: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenEntry {
    bus: i64,
    pmin: f64,
    pmax: f64,
    ramp_up: f64,
    ramp_down: f64,
    mbase: f64,
    emf: f64,
    xs: f64,
    /// Stator current limit on machine base.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ig_max: Option<f64>,
    /// Degrees.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    delta_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    big_m1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    big_m2: Option<f64>,
    #[serde(default)]
    pg0: f64,
    #[serde(default = "one")]
    vg0: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    slack: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WindEntry {
    bus: i64,
    capacity: f64,
    qmin: f64,
    qmax: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ElectrolyzerEntry {
    bus: i64,
    ph_min: f64,
    ph_max: f64,
    #[serde(default)]
    qh_min: f64,
    #[serde(default)]
    qh_max: f64,
    efficiency: f64,
}

/// Parse and validate a case from TOML text.
pub fn parse_case(text: &str) -> Result<NetworkCase, CaseError> {
    let file: CaseFile = toml::from_str(text).map_err(|e| CaseError::Parse(e.to_string()))?;
    if file.format != CASE_FORMAT {
        return Err(invalid("format", format!("expected \"{CASE_FORMAT}\", got \"{}\"", file.format)));
    }
    if file.version != CASE_VERSION {
        return Err(invalid("version", format!("unsupported version {}", file.version)));
    }
    let base = file.base_mva;
    if !(base > 0.0) {
        return Err(invalid("base_mva", "must be positive"));
    }
    let mut index = HashMap::new();
    for (i, b) in file.bus.iter().enumerate() {
        if index.insert(b.id, i).is_some() {
            return Err(invalid(format!("bus[{i}].id"), format!("duplicate bus id {}", b.id)));
        }
    }
    let lookup = |path: String, id: i64| -> Result<usize, CaseError> {
        index
            .get(&id)
            .copied()
            .ok_or_else(|| CaseError::UnknownBus { path, bus: id.to_string() })
    };
    let buses = file
        .bus
        .iter()
        .map(|b| BusRecord {
            id: b.id,
            base_demand_p: b.pd / base,
            base_demand_q: b.qd / base,
            shunt_g: b.gs / base,
            shunt_b: b.bs / base,
            v_min: b.vmin,
            v_max: b.vmax,
            kp: b.kp,
            kq: b.kq,
            kg: b.kg,
            v_init: b.vm0,
            theta_init: b.va0.to_radians(),
        })
        .collect();
    let mut branches = Vec::with_capacity(file.branch.len());
    for (i, br) in file.branch.iter().enumerate() {
        branches.push(BranchRecord {
            from_bus: lookup(format!("branch[{i}].from"), br.from)?,
            to_bus: lookup(format!("branch[{i}].to"), br.to)?,
            r: br.r,
            x: br.x,
            b: br.b,
            tap: if br.tap == 0.0 { 1.0 } else { br.tap },
            s_max: if br.rate_a > 0.0 {
                br.rate_a / base
            } else {
                f64::INFINITY
            },
            in_service: br.in_service,
        });
    }
    let mut generators = Vec::with_capacity(file.gen.len());
    for (i, g) in file.gen.iter().enumerate() {
        let ratio = base / g.mbase;
        generators.push(GeneratorRecord {
            bus: lookup(format!("gen[{i}].bus"), g.bus)?,
            pg_min: g.pmin / base,
            pg_max: g.pmax / base,
            ramp_up: g.ramp_up / base,
            ramp_down: g.ramp_down / base,
            internal_emf: g.emf,
            synchronous_reactance: g.xs * ratio,
            stator_current_max: g.ig_max.unwrap_or(1.0) / ratio,
            delta_max: g.delta_max.unwrap_or(90.0).to_radians(),
            machine_base: g.mbase,
            is_slack: g.slack,
            big_m1: g.big_m1.map(|m| m / base).unwrap_or(2.0 * g.pmax / base),
            big_m2: g.big_m2.map(|m| m / base).unwrap_or(2.0 * g.pmax / base),
            pg_init: g.pg0 / base,
            v_setpoint: g.vg0,
        });
    }
    let mut wind_farms = Vec::with_capacity(file.wind.len());
    for (i, w) in file.wind.iter().enumerate() {
        wind_farms.push(WindFarmRecord {
            bus: lookup(format!("wind[{i}].bus"), w.bus)?,
            capacity: w.capacity / base,
            qw_min: w.qmin / base,
            qw_max: w.qmax / base,
        });
    }
    let mut electrolyzers = Vec::with_capacity(file.electrolyzer.len());
    for (i, e) in file.electrolyzer.iter().enumerate() {
        electrolyzers.push(ElectrolyzerRecord {
            bus: lookup(format!("electrolyzer[{i}].bus"), e.bus)?,
            ph_min: e.ph_min / base,
            ph_max: e.ph_max / base,
            qh_min: e.qh_min / base,
            qh_max: e.qh_max / base,
            efficiency: e.efficiency,
        });
    }
    let case = NetworkCase {
        name: file.name,
        system_base: base,
        buses,
        branches,
        generators,
        wind_farms,
        electrolyzers,
    };
    case.validate()?;
    Ok(case)
}

pub fn load_case(path: impl AsRef<Path>) -> Result<NetworkCase, CaseError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CaseError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_case(&text)
}

/// Render a case in the file schema.
pub fn case_to_toml(case: &NetworkCase) -> String {
    let base = case.system_base;
    let id = |i: usize| case.buses[i].id;
    let file = CaseFile {
        format: CASE_FORMAT.to_string(),
        version: CASE_VERSION,
        name: case.name.clone(),
        base_mva: base,
        bus: case
            .buses
            .iter()
            .map(|b| BusEntry {
                id: b.id,
                pd: b.base_demand_p * base,
                qd: b.base_demand_q * base,
                gs: b.shunt_g * base,
                bs: b.shunt_b * base,
                vmin: b.v_min,
                vmax: b.v_max,
                kp: b.kp,
                kq: b.kq,
                kg: b.kg,
                vm0: b.v_init,
                va0: b.theta_init.to_degrees(),
            })
            .collect(),
        branch: case
            .branches
            .iter()
            .map(|br| BranchEntry {
                from: id(br.from_bus),
                to: id(br.to_bus),
                r: br.r,
                x: br.x,
                b: br.b,
                rate_a: if br.s_max.is_finite() { br.s_max * base } else { 0.0 },
                tap: br.tap,
                in_service: br.in_service,
            })
            .collect(),
        gen: case
            .generators
            .iter()
            .map(|g| {
                let ratio = base / g.machine_base;
                GenEntry {
                    bus: id(g.bus),
                    pmin: g.pg_min * base,
                    pmax: g.pg_max * base,
                    ramp_up: g.ramp_up * base,
                    ramp_down: g.ramp_down * base,
                    mbase: g.machine_base,
                    emf: g.internal_emf,
                    xs: g.synchronous_reactance / ratio,
                    ig_max: Some(g.stator_current_max * ratio),
                    delta_max: Some(g.delta_max.to_degrees()),
                    big_m1: Some(g.big_m1 * base),
                    big_m2: Some(g.big_m2 * base),
                    pg0: g.pg_init * base,
                    vg0: g.v_setpoint,
                    slack: g.is_slack,
                }
            })
            .collect(),
        wind: case
            .wind_farms
            .iter()
            .map(|w| WindEntry {
                bus: id(w.bus),
                capacity: w.capacity * base,
                qmin: w.qw_min * base,
                qmax: w.qw_max * base,
            })
            .collect(),
        electrolyzer: case
            .electrolyzers
            .iter()
            .map(|e| ElectrolyzerEntry {
                bus: id(e.bus),
                ph_min: e.ph_min * base,
                ph_max: e.ph_max * base,
                qh_min: e.qh_min * base,
                qh_max: e.qh_max * base,
                efficiency: e.efficiency,
            })
            .collect(),
    };
    toml::to_string(&file).expect("case schema serializes")
}

pub fn save_case(case: &NetworkCase, path: impl AsRef<Path>) -> Result<(), CaseError> {
    let path = path.as_ref();
    fs::write(path, case_to_toml(case)).map_err(|source| CaseError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// The IEEE 39-bus system with the wind farms and electrolyzers shipped in
/// `data/case39.toml`.
pub fn ieee39() -> NetworkCase {
    parse_case(IEEE39_TOML).expect("bundled case is valid")
}

/// A slack bus feeding one load bus over a lossless line of reactance `x`.
///
/// The slack machine is large enough never to bind; the load bus has
/// `kp = kq = 1` and voltage bounds `[0.9, 1.1]`. Demand is in pu on a
/// 100 MVA base.
pub fn two_bus(x: f64, load_p: f64, load_q: f64) -> NetworkCase {
    let bus = |id: i64, pd: f64, qd: f64, v_min: f64, v_max: f64, k: f64| BusRecord {
        id,
        base_demand_p: pd,
        base_demand_q: qd,
        shunt_g: 0.0,
        shunt_b: 0.0,
        v_min,
        v_max,
        kp: k,
        kq: k,
        kg: 0.0,
        v_init: 1.0,
        theta_init: 0.0,
    };
    let case = NetworkCase {
        name: "two-bus".into(),
        system_base: 100.0,
        buses: vec![bus(1, 0.0, 0.0, 0.999999, 1.000001, 0.0), bus(2, load_p, load_q, 0.9, 1.1, 1.0)],
        branches: vec![BranchRecord {
            from_bus: 0,
            to_bus: 1,
            r: 0.0,
            x,
            b: 0.0,
            tap: 1.0,
            s_max: f64::INFINITY,
            in_service: true,
        }],
        generators: vec![GeneratorRecord {
            bus: 0,
            pg_min: 0.0,
            pg_max: 20.0,
            ramp_up: 20.0,
            ramp_down: 20.0,
            internal_emf: 20.0,
            synchronous_reactance: 1.0,
            stator_current_max: 10.0,
            delta_max: FRAC_PI_2,
            machine_base: 1000.0,
            is_slack: true,
            big_m1: 40.0,
            big_m2: 40.0,
            pg_init: load_p,
            v_setpoint: 1.0,
        }],
        wind_farms: Vec::new(),
        electrolyzers: Vec::new(),
    };
    debug_assert!(case.validate().is_ok());
    case
}

// ---------------------------------------------------------------------------
// Profiles

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourlyProfile {
    pub hour: usize,
    #[serde(rename = "demand_p_MW")]
    pub total_demand_p: f64,
    #[serde(rename = "demand_q_MVAr")]
    pub total_demand_q: f64,
    /// Available power per wind farm.
    #[serde(rename = "wind_available_MW")]
    pub wind_available: f64,
}

const PROFILE_HEADER: [&str; 4] = ["hour", "demand_p_MW", "demand_q_MVAr", "wind_available_MW"];

pub fn parse_profiles(text: &str) -> Result<Vec<HourlyProfile>, CaseError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| CaseError::Parse(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != PROFILE_HEADER {
        return Err(invalid(
            "profile header",
            format!("expected columns {}", PROFILE_HEADER.join(",")),
        ));
    }
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<HourlyProfile>().enumerate() {
        let p = row.map_err(|e| CaseError::Parse(format!("profile row {}: {e}", i + 1)))?;
        for (name, v) in [
            ("demand_p_MW", p.total_demand_p),
            ("demand_q_MVAr", p.total_demand_q),
            ("wind_available_MW", p.wind_available),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("profile[{i}].{name}"), "must be finite and non-negative"));
            }
        }
        out.push(p);
    }
    if out.is_empty() {
        return Err(invalid("profile", "no rows"));
    }
    Ok(out)
}

pub fn load_profiles(path: impl AsRef<Path>) -> Result<Vec<HourlyProfile>, CaseError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CaseError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_profiles(&text)
}

/// The bundled 24-hour demand and wind profile.
pub fn profile24() -> Vec<HourlyProfile> {
    parse_profiles(PROFILE24_CSV).expect("bundled profile is valid")
}

/// Per-bus demand (pu) for one hour.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalDemand {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

/// Scale the base-case demand distribution to the profile totals.
pub fn nodal_demand(case: &NetworkCase, profile: &HourlyProfile) -> Result<NodalDemand, CaseError> {
    let (p0, q0) = case.base_total_demand();
    let scale = |total_mw: f64, base_total: f64, quantity| -> Result<f64, CaseError> {
        let total = total_mw / case.system_base;
        if base_total == 0.0 {
            if total == 0.0 {
                return Ok(0.0);
            }
            return Err(CaseError::ZeroBaseDemand {
                quantity,
                requested: total_mw,
            });
        }
        Ok(total / base_total)
    };
    let sp = scale(profile.total_demand_p, p0, "active")?;
    let sq = scale(profile.total_demand_q, q0, "reactive")?;
    Ok(NodalDemand {
        p: case.buses.iter().map(|b| b.base_demand_p * sp).collect(),
        q: case.buses.iter().map(|b| b.base_demand_q * sq).collect(),
    })
}

/// Available active power (pu) of each wind farm in one hour.
pub fn wind_available(case: &NetworkCase, profile: &HourlyProfile) -> Vec<f64> {
    case.wind_farms
        .iter()
        .map(|w| (profile.wind_available / case.system_base).min(w.capacity))
        .collect()
}

// ---------------------------------------------------------------------------
// Admittance

/// Sparse bus admittance matrix in compressed-row form with sorted columns.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    row_ptr: Vec<usize>,
    col: Vec<usize>,
    val: Vec<Complex64>,
}

impl AdmittanceMatrix {
    pub fn dim(&self) -> usize {
        self.row_ptr.len() - 1
    }

    /// Entries `(k, Y_bk)` of row `b`, diagonal included.
    pub fn row(&self, b: usize) -> impl Iterator<Item = (usize, Complex64)> + '_ {
        let r = self.row_ptr[b]..self.row_ptr[b + 1];
        self.col[r.clone()].iter().copied().zip(self.val[r].iter().copied())
    }

    pub fn get(&self, b: usize, k: usize) -> Complex64 {
        let r = self.row_ptr[b]..self.row_ptr[b + 1];
        match self.col[r.clone()].binary_search(&k) {
            Ok(p) => self.val[r.start + p],
            Err(_) => Complex64::new(0.0, 0.0),
        }
    }

    /// Magnitude `Y_bk`.
    pub fn magnitude(&self, b: usize, k: usize) -> f64 {
        self.get(b, k).norm()
    }

    /// Angle `γ_bk` in radians.
    pub fn angle(&self, b: usize, k: usize) -> f64 {
        self.get(b, k).arg()
    }

    pub fn nnz(&self) -> usize {
        self.col.len()
    }
}

pub fn build_admittance(case: &NetworkCase) -> AdmittanceMatrix {
    let nb = case.buses.len();
    let mut rows: Vec<Vec<(usize, Complex64)>> = vec![Vec::new(); nb];
    for (b, bus) in case.buses.iter().enumerate() {
        rows[b].push((b, Complex64::new(bus.shunt_g, bus.shunt_b)));
    }
    for br in case.branches.iter().filter(|b| b.in_service) {
        let (yff, yft, ytf, ytt) = br.two_port();
        let (f, t) = (br.from_bus, br.to_bus);
        rows[f].push((f, yff));
        rows[f].push((t, yft));
        rows[t].push((f, ytf));
        rows[t].push((t, ytt));
    }
    let mut row_ptr = vec![0];
    let mut col = Vec::new();
    let mut val = Vec::new();
    for mut r in rows {
        r.sort_by_key(|e| e.0);
        let mut last: Option<usize> = None;
        for (k, y) in r {
            if last == Some(k) {
                *val.last_mut().unwrap() += y;
            } else {
                col.push(k);
                val.push(y);
                last = Some(k);
            }
        }
        row_ptr.push(col.len());
    }
    AdmittanceMatrix { row_ptr, col, val }
}
