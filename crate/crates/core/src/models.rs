//! Component dynamics: non-reheat generator with droop governor, dq-frame
//! RL load, dq-frame RL transmission line.
//!
//! Everything here is a pure function of value inputs. Per-unit throughout,
//! time in seconds.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("non-finite input to {component}: {quantity} = {value}")]
    NonFinite {
        component: &'static str,
        quantity: &'static str,
        value: f64,
    },
    #[error("invalid {component} parameter {name} = {value}: {reason}")]
    InvalidParameter {
        component: &'static str,
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
}

fn finite(component: &'static str, quantity: &'static str, value: f64) -> Result<f64, ModelError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(ModelError::NonFinite {
            component,
            quantity,
            value,
        })
    }
}

fn positive(component: &'static str, name: &'static str, value: f64) -> Result<(), ModelError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(ModelError::InvalidParameter {
            component,
            name,
            value,
            reason: "must be finite and > 0",
        })
    }
}

/// Machine constants of the non-reheat generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorParams {
    /// Inertia (s·pu).
    pub m: f64,
    /// Damping (pu power per pu frequency).
    pub d: f64,
    /// Turbine gain.
    pub k_t: f64,
    /// Turbine time constant (s).
    pub t_u: f64,
    /// Governor time constant (s).
    pub t_g: f64,
    /// Droop.
    pub r: f64,
    /// Rated angular velocity (pu).
    #[serde(default = "one")]
    pub omega_0: f64,
    /// Governor speed setpoint (pu).
    #[serde(default = "one")]
    pub omega_ref: f64,
    /// Mechanical power setpoint (pu). Overwritten by equilibrium initialisation.
    #[serde(default)]
    pub p_m_ref: f64,
    /// Saturation limit of the composite AGC input.
    pub u_max: f64,
    /// Optional physical valve range `[a_min, a_max]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valve_limits: Option<[f64; 2]>,
}

fn one() -> f64 {
    1.0
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        const C: &str = "generator";
        positive(C, "m", self.m)?;
        positive(C, "t_u", self.t_u)?;
        positive(C, "t_g", self.t_g)?;
        positive(C, "r", self.r)?;
        positive(C, "k_t", self.k_t)?;
        positive(C, "u_max", self.u_max)?;
        positive(C, "omega_0", self.omega_0)?;
        if !(self.d.is_finite() && self.d >= 0.0) {
            return Err(ModelError::InvalidParameter {
                component: C,
                name: "d",
                value: self.d,
                reason: "must be finite and >= 0",
            });
        }
        finite(C, "omega_ref", self.omega_ref)?;
        finite(C, "p_m_ref", self.p_m_ref)?;
        if let Some([lo, hi]) = self.valve_limits {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(ModelError::InvalidParameter {
                    component: C,
                    name: "valve_limits",
                    value: hi - lo,
                    reason: "need finite a_min < a_max",
                });
            }
        }
        Ok(())
    }

    /// Power-per-control-unit gain `K_t / r`.
    pub fn gain(&self) -> f64 {
        self.k_t / self.r
    }
}

/// `x_G = [δ, ω, P_m, a]`. Also used for its time derivative.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorState {
    pub delta: f64,
    pub omega: f64,
    pub p_m: f64,
    pub a: f64,
}

impl GeneratorState {
    pub fn to_array(self) -> [f64; 4] {
        [self.delta, self.omega, self.p_m, self.a]
    }

    pub fn from_array(x: [f64; 4]) -> Self {
        Self {
            delta: x[0],
            omega: x[1],
            p_m: x[2],
            a: x[3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadParams {
    pub r: f64,
    /// Inductance (pu·s).
    pub l: f64,
}

impl LoadParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        positive("load", "r", self.r)?;
        positive("load", "l", self.l)
    }
}

/// Transmission line. Positive current flows from `from_bus` to `to_bus`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineParams {
    pub r: f64,
    /// Inductance (pu·s).
    pub l: f64,
    pub from_bus: usize,
    pub to_bus: usize,
}

impl LineParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        positive("line", "r", self.r)?;
        positive("line", "l", self.l)?;
        if self.from_bus == self.to_bus {
            return Err(ModelError::InvalidParameter {
                component: "line",
                name: "to_bus",
                value: self.to_bus as f64,
                reason: "line endpoints must differ",
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DqCurrent {
    pub d: f64,
    pub q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DqVoltage {
    pub d: f64,
    pub q: f64,
}

impl DqCurrent {
    pub const ZERO: Self = Self { d: 0.0, q: 0.0 };

    pub fn new(d: f64, q: f64) -> Self {
        Self { d, q }
    }

    pub fn norm(self) -> f64 {
        self.d.hypot(self.q)
    }
}

impl DqVoltage {
    pub const ZERO: Self = Self { d: 0.0, q: 0.0 };

    pub fn new(d: f64, q: f64) -> Self {
        Self { d, q }
    }

    pub fn from_polar(magnitude: f64, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            d: magnitude * c,
            q: magnitude * s,
        }
    }

    pub fn magnitude(self) -> f64 {
        self.d.hypot(self.q)
    }

    /// Real power `v_d i_d + v_q i_q`.
    pub fn power(self, i: DqCurrent) -> f64 {
        self.d * i.d + self.q * i.q
    }
}

impl std::ops::Sub for DqVoltage {
    type Output = DqVoltage;
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.d - rhs.d, self.q - rhs.q)
    }
}

impl std::ops::Add for DqCurrent {
    type Output = DqCurrent;
    fn add(self, rhs: Self) -> Self {
        Self::new(self.d + rhs.d, self.q + rhs.q)
    }
}

impl std::ops::Sub for DqCurrent {
    type Output = DqCurrent;
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.d - rhs.d, self.q - rhs.q)
    }
}

impl std::ops::AddAssign for DqCurrent {
    fn add_assign(&mut self, rhs: Self) {
        self.d += rhs.d;
        self.q += rhs.q;
    }
}

impl std::ops::SubAssign for DqCurrent {
    fn sub_assign(&mut self, rhs: Self) {
        self.d -= rhs.d;
        self.q -= rhs.q;
    }
}

/// Generator rates `(δ̇, ω̇, Ṗ_m, ȧ)`:
///
/// ```text
/// δ̇      = ω_0 (ω − ω_ref)
/// M ω̇    = P_m + P_m_ref − D (ω − ω_0) − P_e
/// T_u Ṗ_m = −P_m + K_t a
/// T_g ȧ   = −r a − (ω − ω_ref) + u
/// ```
///
/// With valve limits enabled, `ȧ` is zeroed when it would push `a` further
/// past a limit.
pub fn generator_deriv(
    state: &GeneratorState,
    params: &GeneratorParams,
    p_e: f64,
    u_agc: f64,
) -> Result<GeneratorState, ModelError> {
    const C: &str = "generator";
    let delta = finite(C, "delta", state.delta)?;
    let omega = finite(C, "omega", state.omega)?;
    let p_m = finite(C, "p_m", state.p_m)?;
    let a = finite(C, "a", state.a)?;
    let p_e = finite(C, "p_e", p_e)?;
    let u = finite(C, "u_agc", u_agc)?;
    let _ = delta;

    let p = params;
    let d_delta = p.omega_0 * (omega - p.omega_ref);
    let d_omega = (p_m + p.p_m_ref - p.d * (omega - p.omega_0) - p_e) / p.m;
    let d_p_m = (-p_m + p.k_t * a) / p.t_u;
    let mut d_a = (-p.r * a - (omega - p.omega_ref) + u) / p.t_g;
    if let Some([lo, hi]) = p.valve_limits {
        if (a >= hi && d_a > 0.0) || (a <= lo && d_a < 0.0) {
            d_a = 0.0;
        }
    }
    Ok(GeneratorState {
        delta: d_delta,
        omega: d_omega,
        p_m: d_p_m,
        a: d_a,
    })
}

/// `L di/dt = −R i + J(ωL i) + v` with `J(x) = (x_q, −x_d)`.
fn rl_branch(
    component: &'static str,
    i: &DqCurrent,
    r: f64,
    l: f64,
    v: DqVoltage,
    omega: f64,
) -> Result<DqCurrent, ModelError> {
    let id = finite(component, "i_d", i.d)?;
    let iq = finite(component, "i_q", i.q)?;
    let vd = finite(component, "v_d", v.d)?;
    let vq = finite(component, "v_q", v.q)?;
    let w = finite(component, "omega", omega)?;
    Ok(DqCurrent {
        d: (-r * id + w * l * iq + vd) / l,
        q: (-r * iq - w * l * id + vq) / l,
    })
}

/// Load current rates in the network frame.
pub fn load_deriv(state: &DqCurrent, params: &LoadParams, v: DqVoltage, omega: f64) -> Result<DqCurrent, ModelError> {
    rl_branch("load", state, params.r, params.l, v, omega)
}

/// Line current rates, driven by `v_left − v_right`.
pub fn line_deriv(
    state: &DqCurrent,
    params: &LineParams,
    v_left: DqVoltage,
    v_right: DqVoltage,
    omega: f64,
) -> Result<DqCurrent, ModelError> {
    for (q, x) in [
        ("v_left.d", v_left.d),
        ("v_left.q", v_left.q),
        ("v_right.d", v_right.d),
        ("v_right.q", v_right.q),
    ] {
        finite("line", q, x)?;
    }
    rl_branch("line", state, params.r, params.l, v_left - v_right, omega)
}
