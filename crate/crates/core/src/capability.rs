//! Reactive capability of a round-rotor synchronous machine: the armature
//! circle, the field circle and the under-excitation line.
//!
//! All quantities are per unit on one common base.

use crate::network::GeneratorRecord;

/// Radicands in `(-RADICAND_EPS, 0)` are treated as zero.
pub const RADICAND_EPS: f64 = 1e-10;

/// Stand-in for an unbounded field limit when the EMF is infinite.
pub const UNBOUNDED_Q: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CapabilityError {
    #[error("active power {pg} lies outside the {limit} circle of radius {radius}")]
    Infeasible {
        limit: &'static str,
        pg: f64,
        radius: f64,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    Armature,
    Field,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapabilityEnvelope {
    pub q_armature: f64,
    pub q_field: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub binding: Binding,
}

fn circle_root(radius: f64, pg: f64, limit: &'static str) -> Result<f64, CapabilityError> {
    let d = radius * radius - pg * pg;
    if d >= 0.0 {
        Ok(d.sqrt())
    } else if d > -RADICAND_EPS {
        Ok(0.0)
    } else {
        Err(CapabilityError::Infeasible { limit, pg, radius })
    }
}

pub fn armature_q_limit(pg: f64, v: f64, ig_max: f64) -> Result<f64, CapabilityError> {
    if !(v > 0.0) || !(ig_max > 0.0) {
        return Err(CapabilityError::InvalidArgument(format!(
            "need v > 0 and ig_max > 0, got {v} and {ig_max}"
        )));
    }
    circle_root(v * ig_max, pg, "armature")
}

pub fn field_q_limit(pg: f64, v: f64, emf: f64, xs: f64) -> Result<f64, CapabilityError> {
    if !(v > 0.0) || !(xs > 0.0) {
        return Err(CapabilityError::InvalidArgument(format!(
            "need v > 0 and xs > 0, got {v} and {xs}"
        )));
    }
    if emf.is_infinite() && emf > 0.0 {
        return Ok(UNBOUNDED_Q);
    }
    Ok(circle_root(v * emf / xs, pg, "field")? - v * v / xs)
}

pub fn underexcitation_q_min(pg: f64, v: f64, xs: f64, delta_max: f64) -> Result<f64, CapabilityError> {
    if !(delta_max > 0.0 && delta_max <= std::f64::consts::FRAC_PI_2 + 1e-12) {
        return Err(CapabilityError::InvalidArgument(format!(
            "delta_max must lie in (0, pi/2], got {delta_max}"
        )));
    }
    if !(xs > 0.0) {
        return Err(CapabilityError::InvalidArgument(format!("xs must be positive, got {xs}")));
    }
    Ok(pg * cot(delta_max) - v * v / xs)
}

/// `cot δ`, exactly zero at `π/2`.
pub fn cot(delta: f64) -> f64 {
    if (delta - std::f64::consts::FRAC_PI_2).abs() < 1e-15 {
        0.0
    } else {
        delta.cos() / delta.sin()
    }
}

pub fn q_envelope(pg: f64, v: f64, gen: &GeneratorRecord) -> Result<CapabilityEnvelope, CapabilityError> {
    let q_armature = armature_q_limit(pg, v, gen.stator_current_max)?;
    let q_field = field_q_limit(pg, v, gen.internal_emf, gen.synchronous_reactance)?;
    let q_min = underexcitation_q_min(pg, v, gen.synchronous_reactance, gen.delta_max)?;
    let (q_max, binding) = if q_armature <= q_field {
        (q_armature, Binding::Armature)
    } else {
        (q_field, Binding::Field)
    };
    Ok(CapabilityEnvelope {
        q_armature,
        q_field,
        q_min,
        q_max,
        binding,
    })
}

/// A reactive limit together with its partial derivatives in `pg` and `v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimitValue {
    pub q: f64,
    pub d_pg: f64,
    pub d_v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LimitSide {
    Upper,
    Lower,
}

/// Active reactive limit on `side` with derivatives, for Newton-type
/// solvers that hold a machine at its limit.
pub fn limit_with_derivatives(
    pg: f64,
    v: f64,
    gen: &GeneratorRecord,
    side: LimitSide,
) -> Result<LimitValue, CapabilityError> {
    let xs = gen.synchronous_reactance;
    match side {
        LimitSide::Lower => Ok(LimitValue {
            q: underexcitation_q_min(pg, v, xs, gen.delta_max)?,
            d_pg: cot(gen.delta_max),
            d_v: -2.0 * v / xs,
        }),
        LimitSide::Upper => {
            let env = q_envelope(pg, v, gen)?;
            match env.binding {
                Binding::Armature => {
                    let i = gen.stator_current_max;
                    let r = env.q_armature.max(1e-12);
                    Ok(LimitValue {
                        q: env.q_armature,
                        d_pg: -pg / r,
                        d_v: v * i * i / r,
                    })
                }
                Binding::Field => {
                    if env.q_field == UNBOUNDED_Q {
                        return Ok(LimitValue {
                            q: UNBOUNDED_Q,
                            d_pg: 0.0,
                            d_v: 0.0,
                        });
                    }
                    let k = gen.internal_emf / xs;
                    let r = (env.q_field + v * v / xs).max(1e-12);
                    Ok(LimitValue {
                        q: env.q_field,
                        d_pg: -pg / r,
                        d_v: v * k * k / r - 2.0 * v / xs,
                    })
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivatives_match_differences() {
        let gen = GeneratorRecord {
            bus: 0,
            pg_min: 0.0,
            pg_max: 6.0,
            ramp_up: 1.0,
            ramp_down: 1.0,
            internal_emf: 2.574,
            synchronous_reactance: 0.25,
            stator_current_max: 7.6,
            delta_max: 1.2,
            machine_base: 760.0,
            is_slack: false,
            big_m1: 12.0,
            big_m2: 12.0,
            pg_init: 0.0,
            v_setpoint: 1.0,
        };
        let h = 1e-6;
        for &(pg, v) in &[(2.0, 1.0), (6.5, 1.02), (5.0, 0.97)] {
            for side in [LimitSide::Upper, LimitSide::Lower] {
                let a = limit_with_derivatives(pg, v, &gen, side).unwrap();
                let fp = |p: f64, vv: f64| limit_with_derivatives(p, vv, &gen, side).unwrap().q;
                let dpg = (fp(pg + h, v) - fp(pg - h, v)) / (2.0 * h);
                let dv = (fp(pg, v + h) - fp(pg, v - h)) / (2.0 * h);
                assert!((a.d_pg - dpg).abs() < 1e-6, "{side:?} d_pg {} vs {}", a.d_pg, dpg);
                assert!((a.d_v - dv).abs() < 1e-6, "{side:?} d_v {} vs {}", a.d_v, dv);
            }
        }
    }
}
