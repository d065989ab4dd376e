//! Interconnected system assembly: topology, bus voltages, the nonlinear
//! couplings (generator electrical power, KCL at shunt-capacitor buses) and
//! the full system derivative.
//!
//! Generator buses are stiff voltage sources `V_g ∠ δ_G`. Every other bus
//! carries a small shunt capacitance whose dq voltage is a state, so the
//! whole network stays an ODE.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

use crate::intv;
use crate::models::{
    generator_deriv, line_deriv, load_deriv, DqCurrent, DqVoltage, GeneratorParams, GeneratorState, LineParams,
    LoadParams, ModelError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("unknown bus index {0}")]
    UnknownBus(usize),
    #[error("unknown generator index {0}")]
    UnknownGenerator(usize),
    #[error("bus {0} is a generator bus and has no capacitor state")]
    NotCapacitorBus(String),
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{component} '{id}': {source}")]
    Component {
        component: &'static str,
        id: String,
        #[source]
        source: ModelError,
    },
    #[error("non-finite {quantity} at {component} '{id}'")]
    NonFinite {
        component: &'static str,
        id: String,
        quantity: &'static str,
    },
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("network admittance matrix is singular")]
    Singular,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: String,
    pub generator: Option<usize>,
    pub load: Option<usize>,
    /// Shunt capacitance (pu·s); mandatory on non-generator buses.
    pub shunt_c: Option<f64>,
    /// Fixed voltage magnitude at a generator bus.
    pub v_mag: f64,
    pub area: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorUnit {
    pub id: String,
    pub bus: usize,
    pub params: GeneratorParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadUnit {
    pub id: String,
    pub bus: usize,
    pub params: LoadParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub id: String,
    pub params: LineParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Area {
    pub id: String,
    pub generators: Vec<usize>,
}

/// Validated network topology with precomputed incidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    buses: Vec<Bus>,
    generators: Vec<GeneratorUnit>,
    loads: Vec<LoadUnit>,
    lines: Vec<Line>,
    areas: Vec<Area>,
    /// Rotation rate of the dq frame seen by the RL branches and shunts
    /// (rad/s).
    frame_omega: f64,
    /// bus -> (line index, +1 if the line leaves the bus, -1 if it enters)
    incidence: Vec<Vec<(usize, f64)>>,
    /// bus -> capacitor state slot
    cap_slot: Vec<Option<usize>>,
    cap_buses: Vec<usize>,
    /// generator -> area
    gen_area: Vec<usize>,
}

impl Topology {
    pub fn new(
        buses: Vec<Bus>,
        generators: Vec<GeneratorUnit>,
        loads: Vec<LoadUnit>,
        lines: Vec<Line>,
        areas: Vec<Area>,
        frame_omega: f64,
    ) -> Result<Self, NetworkError> {
        let nb = buses.len();
        let bad = |m: String| Err(NetworkError::Topology(m));
        if nb == 0 {
            return bad("no buses".into());
        }
        if !(frame_omega.is_finite() && frame_omega >= 0.0) {
            return bad(format!("frame frequency {frame_omega} must be finite and >= 0"));
        }
        for (gi, g) in generators.iter().enumerate() {
            if g.bus >= nb {
                return bad(format!("generator '{}' on unknown bus {}", g.id, g.bus));
            }
            if buses[g.bus].generator != Some(gi) {
                return bad(format!(
                    "generator '{}' not registered on bus '{}'",
                    g.id, buses[g.bus].id
                ));
            }
            g.params.validate().map_err(|source| NetworkError::Component {
                component: "generator",
                id: g.id.clone(),
                source,
            })?;
        }
        for (li, l) in loads.iter().enumerate() {
            if l.bus >= nb {
                return bad(format!("load '{}' on unknown bus {}", l.id, l.bus));
            }
            if buses[l.bus].load != Some(li) {
                return bad(format!("load '{}' not registered on bus '{}'", l.id, buses[l.bus].id));
            }
            l.params.validate().map_err(|source| NetworkError::Component {
                component: "load",
                id: l.id.clone(),
                source,
            })?;
        }
        let mut cap_slot = vec![None; nb];
        let mut cap_buses = Vec::new();
        for (bi, b) in buses.iter().enumerate() {
            if b.area >= areas.len() {
                return bad(format!("bus '{}' in unknown area {}", b.id, b.area));
            }
            match b.generator {
                Some(g) => {
                    if g >= generators.len() || generators[g].bus != bi {
                        return bad(format!("bus '{}' references generator {g} inconsistently", b.id));
                    }
                    if !(b.v_mag.is_finite() && b.v_mag > 0.0) {
                        return bad(format!("generator bus '{}' needs v_mag > 0", b.id));
                    }
                }
                None => match b.shunt_c {
                    Some(c) if c.is_finite() && c > 0.0 => {
                        cap_slot[bi] = Some(cap_buses.len());
                        cap_buses.push(bi);
                    }
                    _ => return bad(format!("non-generator bus '{}' needs a shunt capacitance > 0", b.id)),
                },
            }
            if let Some(l) = b.load {
                if l >= loads.len() || loads[l].bus != bi {
                    return bad(format!("bus '{}' references load {l} inconsistently", b.id));
                }
            }
        }
        let mut incidence = vec![Vec::new(); nb];
        for (k, line) in lines.iter().enumerate() {
            let p = &line.params;
            if p.from_bus >= nb || p.to_bus >= nb {
                return bad(format!("line '{}' references an unknown bus", line.id));
            }
            p.validate().map_err(|source| NetworkError::Component {
                component: "line",
                id: line.id.clone(),
                source,
            })?;
            incidence[p.from_bus].push((k, 1.0));
            incidence[p.to_bus].push((k, -1.0));
        }
        // connectivity
        let mut seen = vec![false; nb];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(b) = queue.pop_front() {
            for &(k, _) in &incidence[b] {
                let p = &lines[k].params;
                let other = if p.from_bus == b { p.to_bus } else { p.from_bus };
                if !seen[other] {
                    seen[other] = true;
                    queue.push_back(other);
                }
            }
        }
        if let Some(b) = seen.iter().position(|s| !s) {
            return bad(format!(
                "bus '{}' is not connected to bus '{}'",
                buses[b].id, buses[0].id
            ));
        }
        // areas partition the generators
        let mut gen_area = vec![usize::MAX; generators.len()];
        for (ai, a) in areas.iter().enumerate() {
            if a.generators.is_empty() {
                return bad(format!("area '{}' has no generators", a.id));
            }
            for &g in &a.generators {
                if g >= generators.len() {
                    return bad(format!("area '{}' references unknown generator {g}", a.id));
                }
                if gen_area[g] != usize::MAX {
                    return bad(format!(
                        "generator '{}' belongs to more than one area",
                        generators[g].id
                    ));
                }
                gen_area[g] = ai;
            }
        }
        if let Some(g) = gen_area.iter().position(|&a| a == usize::MAX) {
            return bad(format!("generator '{}' is in no area", generators[g].id));
        }
        for (g, unit) in generators.iter().enumerate() {
            if buses[unit.bus].area != gen_area[g] {
                return bad(format!(
                    "bus '{}' area differs from its generator's area",
                    buses[unit.bus].id
                ));
            }
        }
        Ok(Self {
            buses,
            generators,
            loads,
            lines,
            areas,
            frame_omega,
            incidence,
            cap_slot,
            cap_buses,
            gen_area,
        })
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }
    pub fn generators(&self) -> &[GeneratorUnit] {
        &self.generators
    }
    pub fn loads(&self) -> &[LoadUnit] {
        &self.loads
    }
    pub fn lines(&self) -> &[Line] {
        &self.lines
    }
    pub fn areas(&self) -> &[Area] {
        &self.areas
    }
    pub fn frame_omega(&self) -> f64 {
        self.frame_omega
    }
    /// Non-generator buses, in capacitor-state order.
    pub fn capacitor_buses(&self) -> &[usize] {
        &self.cap_buses
    }
    pub fn generator_area(&self, gen: usize) -> usize {
        self.gen_area[gen]
    }
    pub fn incidence(&self, bus: usize) -> &[(usize, f64)] {
        &self.incidence[bus]
    }

    /// Replace a generator's parameters (used by equilibrium initialisation
    /// and weight sweeps).
    pub fn set_generator_params(&mut self, gen: usize, params: GeneratorParams) -> Result<(), NetworkError> {
        let unit = self
            .generators
            .get_mut(gen)
            .ok_or(NetworkError::UnknownGenerator(gen))?;
        params.validate().map_err(|source| NetworkError::Component {
            component: "generator",
            id: unit.id.clone(),
            source,
        })?;
        unit.params = params;
        Ok(())
    }

    /// Lines whose endpoints lie in different areas.
    pub fn tie_lines(&self) -> impl Iterator<Item = usize> + '_ {
        self.lines
            .iter()
            .enumerate()
            .filter_map(|(k, l)| (self.buses[l.params.from_bus].area != self.buses[l.params.to_bus].area).then_some(k))
    }

    pub fn zero_state(&self) -> SystemState {
        SystemState {
            generators: vec![GeneratorState::default(); self.generators.len()],
            loads: vec![DqCurrent::ZERO; self.loads.len()],
            lines: vec![DqCurrent::ZERO; self.lines.len()],
            buses: vec![DqVoltage::ZERO; self.cap_buses.len()],
            z_c: vec![0.0; self.generators.len()],
            z_r: vec![0.0; self.areas.len()],
            z_s: 0.0,
        }
    }
}

/// Disturbance entering at a bus as an extra conductance-like draw
/// `i = g(t) · v`; `amplitude` is therefore pu power at 1 pu voltage.
/// Negative values inject power (renewable generation).
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceSpec {
    pub bus: usize,
    pub kind: DisturbanceKind,
    pub amplitude: f64,
    pub start: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DisturbanceKind {
    Step,
    Sinusoid { frequency_hz: f64 },
    FilteredNoise { corner_hz: f64, seed: u64 },
}

/// Flat composition of all component states plus the IntV accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub generators: Vec<GeneratorState>,
    pub loads: Vec<DqCurrent>,
    pub lines: Vec<DqCurrent>,
    /// Capacitor voltages of the non-generator buses.
    pub buses: Vec<DqVoltage>,
    pub z_c: Vec<f64>,
    pub z_r: Vec<f64>,
    pub z_s: f64,
}

impl SystemState {
    pub fn dim(&self) -> usize {
        4 * self.generators.len()
            + 2 * (self.loads.len() + self.lines.len() + self.buses.len())
            + self.z_c.len()
            + self.z_r.len()
            + 1
    }

    pub fn write_into(&self, out: &mut Vec<f64>) {
        out.clear();
        for g in &self.generators {
            out.extend_from_slice(&g.to_array());
        }
        for i in self.loads.iter().chain(&self.lines) {
            out.extend_from_slice(&[i.d, i.q]);
        }
        for v in &self.buses {
            out.extend_from_slice(&[v.d, v.q]);
        }
        out.extend_from_slice(&self.z_c);
        out.extend_from_slice(&self.z_r);
        out.push(self.z_s);
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        self.write_into(&mut v);
        v
    }

    /// Overwrite this state (whose shape is kept) from a flat slice.
    pub fn read_from(&mut self, x: &[f64]) -> Result<(), NetworkError> {
        if x.len() != self.dim() {
            return Err(NetworkError::Dimension {
                what: "flat state",
                expected: self.dim(),
                got: x.len(),
            });
        }
        let mut it = x.iter().copied();
        let mut next = || it.next().unwrap_or_default();
        for g in &mut self.generators {
            *g = GeneratorState::from_array([next(), next(), next(), next()]);
        }
        for i in self.loads.iter_mut().chain(self.lines.iter_mut()) {
            *i = DqCurrent::new(next(), next());
        }
        for v in &mut self.buses {
            *v = DqVoltage::new(next(), next());
        }
        for z in self.z_c.iter_mut().chain(self.z_r.iter_mut()) {
            *z = next();
        }
        self.z_s = next();
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|x| x.is_finite())
    }

    fn check_shape(&self, topo: &Topology) -> Result<(), NetworkError> {
        let checks = [
            ("generator states", topo.generators.len(), self.generators.len()),
            ("load states", topo.loads.len(), self.loads.len()),
            ("line states", topo.lines.len(), self.lines.len()),
            ("bus voltage states", topo.cap_buses.len(), self.buses.len()),
            ("z_c", topo.generators.len(), self.z_c.len()),
            ("z_r", topo.areas.len(), self.z_r.len()),
        ];
        for (what, expected, got) in checks {
            if expected != got {
                return Err(NetworkError::Dimension { what, expected, got });
            }
        }
        Ok(())
    }
}

/// Exogenous inputs held over one derivative evaluation.
#[derive(Debug, Clone, Copy)]
pub struct NetworkInputs<'a> {
    /// Applied (saturated) AGC input per generator.
    pub controls: &'a [f64],
    /// Disturbance conductance per bus.
    pub bus_draws: &'a [f64],
}

pub fn bus_voltage(bus: usize, state: &SystemState, topo: &Topology) -> Result<DqVoltage, NetworkError> {
    let b = topo.buses.get(bus).ok_or(NetworkError::UnknownBus(bus))?;
    match b.generator {
        Some(g) => {
            let delta = state.generators.get(g).ok_or(NetworkError::UnknownGenerator(g))?.delta;
            Ok(DqVoltage::from_polar(b.v_mag, delta))
        }
        None => {
            let slot = topo.cap_slot[bus].ok_or(NetworkError::UnknownBus(bus))?;
            state.buses.get(slot).copied().ok_or(NetworkError::Dimension {
                what: "bus voltage states",
                expected: topo.cap_buses.len(),
                got: state.buses.len(),
            })
        }
    }
}

fn draw_at(bus: usize, draws: &[f64]) -> f64 {
    draws.get(bus).copied().unwrap_or(0.0)
}

/// KCL at a bus: line currents in, minus line currents out, minus the local
/// load and disturbance draw.
pub fn net_injection_current(
    bus: usize,
    state: &SystemState,
    topo: &Topology,
    bus_draws: &[f64],
) -> Result<DqCurrent, NetworkError> {
    let b = topo.buses.get(bus).ok_or(NetworkError::UnknownBus(bus))?;
    let mut net = DqCurrent::ZERO;
    for &(k, sign) in &topo.incidence[bus] {
        let i = state.lines[k];
        net -= DqCurrent::new(sign * i.d, sign * i.q);
    }
    if let Some(l) = b.load {
        net -= state.loads[l];
    }
    let g = draw_at(bus, bus_draws);
    if g != 0.0 {
        let v = bus_voltage(bus, state, topo)?;
        net -= DqCurrent::new(g * v.d, g * v.q);
    }
    Ok(net)
}

/// Real power delivered by a generator: bus voltage dotted with the total
/// current leaving its bus (lines out, local load, local disturbance draw).
pub fn electrical_power(
    gen: usize,
    state: &SystemState,
    topo: &Topology,
    bus_draws: &[f64],
) -> Result<f64, NetworkError> {
    let unit = topo.generators.get(gen).ok_or(NetworkError::UnknownGenerator(gen))?;
    let v = bus_voltage(unit.bus, state, topo)?;
    let out = DqCurrent::ZERO - net_injection_current(unit.bus, state, topo, bus_draws)?;
    Ok(v.power(out))
}

/// `C v̇_d = I_d + ωC v_q`, `C v̇_q = I_q − ωC v_d`.
pub fn shunt_deriv(c: f64, v: DqVoltage, i_net: DqCurrent, omega: f64) -> DqVoltage {
    DqVoltage::new((i_net.d + omega * c * v.q) / c, (i_net.q - omega * c * v.d) / c)
}

pub fn capacitor_bus_deriv(
    bus: usize,
    state: &SystemState,
    topo: &Topology,
    bus_draws: &[f64],
) -> Result<DqVoltage, NetworkError> {
    let b = topo.buses.get(bus).ok_or(NetworkError::UnknownBus(bus))?;
    let c = match (b.generator, b.shunt_c) {
        (None, Some(c)) => c,
        _ => return Err(NetworkError::NotCapacitorBus(b.id.clone())),
    };
    let v = bus_voltage(bus, state, topo)?;
    let i = net_injection_current(bus, state, topo, bus_draws)?;
    Ok(shunt_deriv(c, v, i, topo.frame_omega))
}

/// Per-generator electrical power for the whole system.
pub fn electrical_powers(state: &SystemState, topo: &Topology, bus_draws: &[f64]) -> Result<Vec<f64>, NetworkError> {
    (0..topo.generators.len())
        .map(|g| electrical_power(g, state, topo, bus_draws))
        .collect()
}

/// Full system derivative. All couplings are evaluated from the same input
/// state.
pub fn system_deriv(
    state: &SystemState,
    inputs: &NetworkInputs<'_>,
    topo: &Topology,
) -> Result<SystemState, NetworkError> {
    state.check_shape(topo)?;
    if inputs.controls.len() != topo.generators.len() {
        return Err(NetworkError::Dimension {
            what: "controls",
            expected: topo.generators.len(),
            got: inputs.controls.len(),
        });
    }
    if inputs.bus_draws.len() != topo.buses.len() {
        return Err(NetworkError::Dimension {
            what: "bus draws",
            expected: topo.buses.len(),
            got: inputs.bus_draws.len(),
        });
    }
    let w = topo.frame_omega;
    let voltages = (0..topo.buses.len())
        .map(|b| bus_voltage(b, state, topo))
        .collect::<Result<Vec<_>, _>>()?;

    let mut out = topo.zero_state();
    let p_e = electrical_powers(state, topo, inputs.bus_draws)?;
    for (g, unit) in topo.generators.iter().enumerate() {
        if !p_e[g].is_finite() {
            return Err(NetworkError::NonFinite {
                component: "generator",
                id: unit.id.clone(),
                quantity: "electrical power",
            });
        }
        out.generators[g] =
            generator_deriv(&state.generators[g], &unit.params, p_e[g], inputs.controls[g]).map_err(|source| {
                NetworkError::Component {
                    component: "generator",
                    id: unit.id.clone(),
                    source,
                }
            })?;
    }
    for (l, unit) in topo.loads.iter().enumerate() {
        out.loads[l] = load_deriv(&state.loads[l], &unit.params, voltages[unit.bus], w).map_err(|source| {
            NetworkError::Component {
                component: "load",
                id: unit.id.clone(),
                source,
            }
        })?;
    }
    for (k, line) in topo.lines.iter().enumerate() {
        let p = &line.params;
        out.lines[k] =
            line_deriv(&state.lines[k], p, voltages[p.from_bus], voltages[p.to_bus], w).map_err(|source| {
                NetworkError::Component {
                    component: "line",
                    id: line.id.clone(),
                    source,
                }
            })?;
    }
    for (slot, &b) in topo.cap_buses.iter().enumerate() {
        let dv = capacitor_bus_deriv(b, state, topo, inputs.bus_draws)?;
        if !(dv.d.is_finite() && dv.q.is_finite()) {
            return Err(NetworkError::NonFinite {
                component: "bus",
                id: topo.buses[b].id.clone(),
                quantity: "voltage rate",
            });
        }
        out.buses[slot] = dv;
    }
    let rates = intv::layer_rates(topo, &p_e, inputs.controls);
    out.z_c = rates.z_c_dot;
    out.z_r = rates.z_r_dot;
    out.z_s = rates.z_s_dot;
    Ok(out)
}

/// Instantaneous power bookkeeping of the network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerBalance {
    pub generated: f64,
    /// Terminal power into loads (resistive + magnetic storage rate).
    pub load_power: f64,
    pub line_losses: f64,
    /// Rate of change of magnetic energy in the lines.
    pub line_storage_rate: f64,
    /// Rate of change of energy in the shunt capacitors.
    pub shunt_storage_rate: f64,
    pub disturbance_power: f64,
}

impl PowerBalance {
    pub fn residual(&self) -> f64 {
        self.generated
            - self.load_power
            - self.line_losses
            - self.line_storage_rate
            - self.shunt_storage_rate
            - self.disturbance_power
    }

    /// Residual relative to the largest magnitude term.
    pub fn relative_residual(&self) -> f64 {
        let scale = [
            self.generated,
            self.load_power,
            self.line_losses,
            self.line_storage_rate,
            self.shunt_storage_rate,
            self.disturbance_power,
        ]
        .iter()
        .fold(0.0f64, |m, x| m.max(x.abs()));
        if scale == 0.0 {
            0.0
        } else {
            self.residual().abs() / scale
        }
    }
}

/// Energy accounting computed from the component states and their rates,
/// independent of the KCL wiring used by [`system_deriv`].
pub fn power_balance(
    state: &SystemState,
    deriv: &SystemState,
    topo: &Topology,
    bus_draws: &[f64],
) -> Result<PowerBalance, NetworkError> {
    let generated = electrical_powers(state, topo, bus_draws)?.iter().sum();
    let mut load_power = 0.0;
    for (l, unit) in topo.loads.iter().enumerate() {
        let i = state.loads[l];
        let di = deriv.loads[l];
        load_power += unit.params.r * (i.d * i.d + i.q * i.q) + unit.params.l * (i.d * di.d + i.q * di.q);
    }
    let mut line_losses = 0.0;
    let mut line_storage_rate = 0.0;
    for (k, line) in topo.lines.iter().enumerate() {
        let i = state.lines[k];
        let di = deriv.lines[k];
        line_losses += line.params.r * (i.d * i.d + i.q * i.q);
        line_storage_rate += line.params.l * (i.d * di.d + i.q * di.q);
    }
    let mut shunt_storage_rate = 0.0;
    for (slot, &b) in topo.cap_buses.iter().enumerate() {
        let c = topo.buses[b].shunt_c.unwrap_or_default();
        let v = state.buses[slot];
        let dv = deriv.buses[slot];
        shunt_storage_rate += c * (v.d * dv.d + v.q * dv.q);
    }
    let mut disturbance_power = 0.0;
    for b in 0..topo.buses.len() {
        let g = draw_at(b, bus_draws);
        if g != 0.0 {
            let v = bus_voltage(b, state, topo)?;
            disturbance_power += g * (v.d * v.d + v.q * v.q);
        }
    }
    Ok(PowerBalance {
        generated,
        load_power,
        line_losses,
        line_storage_rate,
        shunt_storage_rate,
        disturbance_power,
    })
}

/// Steady operating point for given rotor angles: phasor solution of the RL
/// network with the generator buses as sources. Returns component states
/// (speeds at `ω_ref`, `P_m = a = 0`, IntV accumulators zero) and the
/// electrical power of every generator, which is the `P_m_ref` that makes
/// the point an exact equilibrium with zero AGC input.
pub fn phasor_equilibrium(
    topo: &Topology,
    angles: &[f64],
    bus_draws: &[f64],
) -> Result<(SystemState, Vec<f64>), NetworkError> {
    if angles.len() != topo.generators.len() {
        return Err(NetworkError::Dimension {
            what: "initial angles",
            expected: topo.generators.len(),
            got: angles.len(),
        });
    }
    let w = topo.frame_omega;
    let z = |r: f64, l: f64| Complex64::new(r, w * l);
    let nb = topo.buses.len();
    let mut v = vec![Complex64::new(0.0, 0.0); nb];
    for (g, unit) in topo.generators.iter().enumerate() {
        v[unit.bus] = Complex64::from_polar(topo.buses[unit.bus].v_mag, angles[g]);
    }

    let n = topo.cap_buses.len();
    if n > 0 {
        let mut y = DMatrix::<Complex64>::zeros(n, n);
        let mut rhs = DVector::<Complex64>::zeros(n);
        for (row, &b) in topo.cap_buses.iter().enumerate() {
            let bus = &topo.buses[b];
            let mut diag = Complex64::new(draw_at(b, bus_draws), w * bus.shunt_c.unwrap_or_default());
            if let Some(l) = bus.load {
                let p = topo.loads[l].params;
                diag += z(p.r, p.l).inv();
            }
            for &(k, _) in &topo.incidence[b] {
                let p = &topo.lines[k].params;
                let yl = z(p.r, p.l).inv();
                diag += yl;
                let other = if p.from_bus == b { p.to_bus } else { p.from_bus };
                match topo.cap_slot[other] {
                    Some(col) => y[(row, col)] -= yl,
                    None => rhs[row] += yl * v[other],
                }
            }
            y[(row, row)] += diag;
        }
        let sol = y.lu().solve(&rhs).ok_or(NetworkError::Singular)?;
        for (row, &b) in topo.cap_buses.iter().enumerate() {
            v[b] = sol[row];
        }
    }

    let to_dq_i = |c: Complex64| DqCurrent::new(c.re, c.im);
    let mut state = topo.zero_state();
    for (g, unit) in topo.generators.iter().enumerate() {
        state.generators[g] = GeneratorState {
            delta: angles[g],
            omega: unit.params.omega_ref,
            p_m: 0.0,
            a: 0.0,
        };
    }
    for (l, unit) in topo.loads.iter().enumerate() {
        state.loads[l] = to_dq_i(v[unit.bus] / z(unit.params.r, unit.params.l));
    }
    for (k, line) in topo.lines.iter().enumerate() {
        let p = &line.params;
        state.lines[k] = to_dq_i((v[p.from_bus] - v[p.to_bus]) / z(p.r, p.l));
    }
    for (slot, &b) in topo.cap_buses.iter().enumerate() {
        state.buses[slot] = DqVoltage::new(v[b].re, v[b].im);
    }
    let p_e = electrical_powers(&state, topo, bus_draws)?;
    Ok((state, p_e))
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn generator_bus_voltage_follows_rotor_angle() {
        let topo = two_bus(1.0);
        let mut s = topo.zero_state();
        let v = bus_voltage(0, &s, &topo).unwrap();
        assert_eq!((v.d, v.q), (1.0, 0.0));
        s.generators[0].delta = std::f64::consts::FRAC_PI_2;
        let v = bus_voltage(0, &s, &topo).unwrap();
        assert_abs_diff_eq!(v.d, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v.q, 1.0, epsilon = 1e-15);
        assert_eq!(bus_voltage(7, &s, &topo), Err(NetworkError::UnknownBus(7)));
    }

    #[test]
    fn generator_bus_voltage_hand_value() {
        let v = DqVoltage::from_polar(1.05, 0.1);
        assert_abs_diff_eq!(v.d, 1.044755, epsilon = 1e-6);
        assert_abs_diff_eq!(v.q, 0.104825, epsilon = 1e-5);
    }

    #[test]
    fn capacitor_bus_voltage_is_state() {
        let topo = two_bus(1.0);
        let mut s = topo.zero_state();
        s.buses[0] = DqVoltage::new(0.9, -0.1);
        assert_eq!(bus_voltage(1, &s, &topo).unwrap(), DqVoltage::new(0.9, -0.1));
    }

    #[test]
    fn net_injection_sums() {
        let topo = three_bus(1.0);
        let mut s = topo.zero_state();
        // bus M: T1 enters (0 -> 1), T2 enters (2 -> 1)
        s.lines[0] = DqCurrent::new(0.5, 0.1);
        s.loads[1] = DqCurrent::new(0.2, 0.0);
        let i = net_injection_current(1, &s, &topo, &[0.0; 3]).unwrap();
        assert_abs_diff_eq!(i.d, 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(i.q, 0.1, epsilon = 1e-15);

        // bus A: T1 leaves; with a load
        s.loads[0] = DqCurrent::ZERO;
        let i = net_injection_current(0, &s, &topo, &[0.0; 3]).unwrap();
        assert_eq!(i, DqCurrent::new(-0.5, -0.1));
    }

    #[test]
    fn net_injection_in_and_out() {
        // one in (0.5, 0.1), one out (0.3, 0.05), no load
        let topo = three_bus(1.0);
        let mut s = topo.zero_state();
        s.lines[0] = DqCurrent::new(0.5, 0.1); // into M
        s.lines[1] = DqCurrent::new(-0.3, -0.05); // C -> M negative: out of M
        let i = net_injection_current(1, &s, &topo, &[0.0; 3]).unwrap();
        assert_abs_diff_eq!(i.d, 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(i.q, 0.05, epsilon = 1e-15);
    }

    #[test]
    fn isolated_like_bus_has_zero_injection() {
        let topo = three_bus(1.0);
        let s = topo.zero_state();
        assert_eq!(net_injection_current(2, &s, &topo, &[0.0; 3]).unwrap(), DqCurrent::ZERO);
    }

    #[test]
    fn electrical_power_is_dot_product() {
        let topo = two_bus(1.0);
        let mut s = topo.zero_state();
        s.lines[0] = DqCurrent::new(0.5, 0.2);
        assert_abs_diff_eq!(electrical_power(0, &s, &topo, &[0.0; 2]).unwrap(), 0.5, epsilon = 1e-15);
        s.lines[0] = DqCurrent::ZERO;
        assert_eq!(electrical_power(0, &s, &topo, &[0.0; 2]).unwrap(), 0.0);
        s.generators[0].delta = 0.6f64.atan2(0.8);
        s.lines[0] = DqCurrent::new(0.25, -0.25);
        assert_abs_diff_eq!(
            electrical_power(0, &s, &topo, &[0.0; 2]).unwrap(),
            0.05,
            epsilon = 1e-12
        );
        assert!(electrical_power(3, &s, &topo, &[0.0; 2]).is_err());
    }

    #[test]
    fn capacitor_examples() {
        let z = shunt_deriv(1e-3, DqVoltage::ZERO, DqCurrent::ZERO, 1.0);
        assert_eq!(z, DqVoltage::ZERO);
        let d = shunt_deriv(1e-3, DqVoltage::new(1.0, 0.0), DqCurrent::ZERO, 1.0);
        assert_abs_diff_eq!(d.d, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.q, -1.0, epsilon = 1e-12);
        let d = shunt_deriv(1e-3, DqVoltage::ZERO, DqCurrent::new(0.01, 0.0), 1.0);
        assert_abs_diff_eq!(d.d, 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.q, 0.0, epsilon = 1e-12);

        let topo = two_bus(1.0);
        let s = topo.zero_state();
        assert!(matches!(
            capacitor_bus_deriv(0, &s, &topo, &[0.0; 2]),
            Err(NetworkError::NotCapacitorBus(_))
        ));
    }

    #[test]
    fn two_bus_derivative_composes_component_derivatives() {
        let topo = two_bus(1.0);
        let mut s = topo.zero_state();
        s.generators[0] = GeneratorState {
            delta: 0.0,
            omega: 1.01,
            p_m: 0.5,
            a: 0.4,
        };
        s.lines[0] = DqCurrent::new(0.6, 0.0);
        s.loads[0] = DqCurrent::new(1.0, 0.0);
        s.buses[0] = DqVoltage::new(1.0, 0.0);
        let d = system_deriv(
            &s,
            &NetworkInputs {
                controls: &[0.0],
                bus_draws: &[0.0; 2],
            },
            &topo,
        )
        .unwrap();
        // generator: P_e = 1 * 0.6 -> hand values from the component example
        assert_abs_diff_eq!(d.generators[0].delta, 0.01, epsilon = 1e-12);
        assert_abs_diff_eq!(d.generators[0].omega, 0.009, epsilon = 1e-12);
        assert_abs_diff_eq!(d.generators[0].p_m, -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(d.generators[0].a, -0.3, epsilon = 1e-12);
        // load at (1,0) with v=(1,0): (0, -1)
        assert_abs_diff_eq!(d.loads[0].d, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.loads[0].q, -1.0, epsilon = 1e-12);
        // line: no voltage difference, i=(0.6,0): ((-0.06)/0.01, -0.006/0.01)
        assert_abs_diff_eq!(d.lines[0].d, -6.0, epsilon = 1e-9);
        assert_abs_diff_eq!(d.lines[0].q, -0.6, epsilon = 1e-9);
        // bus: I_net = 0.6 - 1.0 = -0.4 -> (-400, -1)
        assert_abs_diff_eq!(d.buses[0].d, -400.0, epsilon = 1e-9);
        assert_abs_diff_eq!(d.buses[0].q, -1.0, epsilon = 1e-9);
        // IntV: P_m_ref - P_e = 0.2 - 0.6
        assert_abs_diff_eq!(d.z_c[0], -0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(d.z_r[0], -0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(d.z_s, -0.4, epsilon = 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let topo = two_bus(1.0);
        let s = topo.zero_state();
        let err = system_deriv(
            &s,
            &NetworkInputs {
                controls: &[0.0, 0.0],
                bus_draws: &[0.0; 2],
            },
            &topo,
        )
        .unwrap_err();
        assert!(matches!(err, NetworkError::Dimension { what: "controls", .. }));
    }

    #[test]
    fn non_finite_reports_component() {
        let topo = two_bus(1.0);
        let mut s = topo.zero_state();
        s.loads[0].d = f64::NAN;
        let err = system_deriv(
            &s,
            &NetworkInputs {
                controls: &[0.0],
                bus_draws: &[0.0; 2],
            },
            &topo,
        )
        .unwrap_err();
        assert!(
            err.to_string().contains("L1") || err.to_string().contains("G1"),
            "{err}"
        );
    }

    #[test]
    fn equilibrium_has_zero_derivative() {
        for w in [1.0, 376.99] {
            let topo = three_bus(w);
            let draws = [0.0, 0.05, 0.0];
            let (state, p_e) = phasor_equilibrium(&topo, &[0.0, -0.05], &draws).unwrap();
            let mut topo = topo;
            for (g, pe) in p_e.iter().enumerate() {
                let mut p = topo.generators()[g].params;
                p.p_m_ref = *pe;
                topo.set_generator_params(g, p).unwrap();
            }
            let d = system_deriv(
                &state,
                &NetworkInputs {
                    controls: &[0.0, 0.0],
                    bus_draws: &draws,
                },
                &topo,
            )
            .unwrap();
            let scale: f64 = state.to_vec().iter().fold(0.0, |m, x| m.max(x.abs()));
            for x in d.to_vec() {
                assert!(x.abs() < 1e-9 * scale.max(1.0) * w.max(1.0), "{x}");
            }
        }
    }

    #[test]
    fn topology_validation() {
        let topo = two_bus(1.0);
        let mut buses = topo.buses().to_vec();
        buses[1].shunt_c = None;
        let err = Topology::new(
            buses,
            topo.generators().to_vec(),
            topo.loads().to_vec(),
            topo.lines().to_vec(),
            topo.areas().to_vec(),
            1.0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("shunt"));

        let err = Topology::new(
            topo.buses().to_vec(),
            topo.generators().to_vec(),
            topo.loads().to_vec(),
            vec![],
            topo.areas().to_vec(),
            1.0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("not connected"));

        let err = Topology::new(
            topo.buses().to_vec(),
            topo.generators().to_vec(),
            topo.loads().to_vec(),
            topo.lines().to_vec(),
            vec![Area {
                id: "A1".into(),
                generators: vec![0, 3],
            }],
            1.0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("unknown generator"));
    }

    #[test]
    fn flat_roundtrip() {
        let topo = three_bus(1.0);
        let (mut s, _) = phasor_equilibrium(&topo, &[0.1, -0.2], &[0.0; 3]).unwrap();
        s.z_c = vec![0.5, -0.25];
        s.z_s = 3.0;
        let flat = s.to_vec();
        assert_eq!(flat.len(), s.dim());
        let mut back = topo.zero_state();
        back.read_from(&flat).unwrap();
        assert_eq!(back, s);
        assert!(back.read_from(&flat[1..]).is_err());
    }

    fn arb_state(topo: &Topology) -> impl Strategy<Value = SystemState> {
        let n = topo.zero_state().dim();
        let shape = topo.zero_state();
        proptest::collection::vec(-1.5..1.5f64, n).prop_map(move |x| {
            let mut s = shape.clone();
            s.read_from(&x).unwrap();
            for g in &mut s.generators {
                g.omega += 1.0;
            }
            s
        })
    }

    proptest! {
        #[test]
        fn energy_bookkeeping_closes(
            s in arb_state(&three_bus(376.99)),
            d in proptest::collection::vec(-0.3..0.3f64, 3),
        ) {
            let topo = three_bus(376.99);
            let controls = [0.0, 0.0];
            let deriv = system_deriv(&s, &NetworkInputs { controls: &controls, bus_draws: &d }, &topo).unwrap();
            let bal = power_balance(&s, &deriv, &topo, &d).unwrap();
            prop_assert!(bal.relative_residual() < 1e-9, "{:?}", bal);
        }

        #[test]
        fn derivative_is_pure(s in arb_state(&three_bus(1.0))) {
            let topo = three_bus(1.0);
            let inputs = NetworkInputs { controls: &[0.01, -0.02], bus_draws: &[0.0, 0.1, 0.0] };
            let a = system_deriv(&s, &inputs, &topo).unwrap().to_vec();
            let b = system_deriv(&s, &inputs, &topo).unwrap().to_vec();
            prop_assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }

        #[test]
        fn branch_blocks_superpose_at_fixed_angles(
            s1 in arb_state(&three_bus(1.0)),
            s2 in arb_state(&three_bus(1.0)),
        ) {
            // with generator angles held equal, line/load/shunt rates are
            // affine in (branch currents, shunt voltages)
            let topo = three_bus(1.0);
            let inputs = NetworkInputs { controls: &[0.0, 0.0], bus_draws: &[0.0; 3] };
            let mut s2 = s2;
            s2.generators = s1.generators.clone();
            let mut sum = s1.clone();
            for (a, b) in sum.loads.iter_mut().zip(&s2.loads) { *a += *b; }
            for (a, b) in sum.lines.iter_mut().zip(&s2.lines) { *a += *b; }
            for (a, b) in sum.buses.iter_mut().zip(&s2.buses) { a.d += b.d; a.q += b.q; }
            let mut base = s1.clone();
            for x in base.loads.iter_mut().chain(base.lines.iter_mut()) { *x = DqCurrent::ZERO; }
            for v in &mut base.buses { *v = DqVoltage::ZERO; }
            let f = |s: &SystemState| system_deriv(s, &inputs, &topo).unwrap();
            let (fs, f1, f2, f0) = (f(&sum), f(&s1), f(&s2), f(&base));
            for k in 0..2 {
                let lhs = fs.lines[k];
                let rhs = f1.lines[k] + f2.lines[k] - f0.lines[k];
                prop_assert!((lhs - rhs).norm() < 1e-9 * (1.0 + lhs.norm()));
                let lhs = fs.loads[k];
                let rhs = f1.loads[k] + f2.loads[k] - f0.loads[k];
                prop_assert!((lhs - rhs).norm() < 1e-9 * (1.0 + lhs.norm()));
            }
        }
    }
}
