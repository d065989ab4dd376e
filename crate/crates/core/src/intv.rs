//! Interaction variables at component, area and system level.
//!
//! A component IntV is constant whenever that component carries no net
//! power imbalance; its rate is the imbalance. Area and system rates are
//! plain sums of the layer below.

use crate::models::{GeneratorParams, GeneratorState};
use crate::network::Topology;

/// `ż_c = P_m_ref − P_e + (K_t / r) u`.
pub fn component_intv_rate(p_m_ref: f64, p_e: f64, u_c: f64, params: &GeneratorParams) -> f64 {
    p_m_ref - p_e + params.gain() * u_c
}

/// # Panics
/// On an empty member list; every area owns at least one generator.
pub fn area_intv_rate(member_rates: &[f64]) -> f64 {
    assert!(!member_rates.is_empty(), "area without generators");
    member_rates.iter().sum()
}

/// # Panics
/// On an empty area list.
pub fn system_intv_rate(area_rates: &[f64]) -> f64 {
    assert!(!area_rates.is_empty(), "system without areas");
    area_rates.iter().sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntvRates {
    pub z_c_dot: Vec<f64>,
    pub z_r_dot: Vec<f64>,
    pub z_s_dot: f64,
}

/// All three layers from measured electrical powers and the applied AGC
/// inputs.
pub fn layer_rates(topo: &Topology, p_e: &[f64], applied: &[f64]) -> IntvRates {
    let z_c_dot: Vec<f64> = topo
        .generators()
        .iter()
        .zip(p_e.iter().zip(applied))
        .map(|(g, (&pe, &u))| component_intv_rate(g.params.p_m_ref, pe, u, &g.params))
        .collect();
    let z_r_dot: Vec<f64> = topo
        .areas()
        .iter()
        .map(|a| {
            let members: Vec<f64> = a.generators.iter().map(|&g| z_c_dot[g]).collect();
            area_intv_rate(&members)
        })
        .collect();
    let z_s_dot = system_intv_rate(&z_r_dot);
    IntvRates {
        z_c_dot,
        z_r_dot,
        z_s_dot,
    }
}

/// Closed-form component IntV in terms of the generator's own states:
///
/// ```text
/// z = (D + K_t/r)/ω_0 · δ + M ω + T_u P_m + (T_g K_t / r) a
/// ```
///
/// Its time derivative along the generator dynamics is exactly
/// [`component_intv_rate`] with the applied input, provided `ω_ref = ω_0`
/// and the valve is not at a limit.
pub fn component_intv_from_state(state: &GeneratorState, params: &GeneratorParams) -> f64 {
    let p = params;
    (p.d + p.gain()) / p.omega_0 * state.delta + p.m * state.omega + p.t_u * state.p_m + p.t_g * p.gain() * state.a
}
