//! Scenario execution: initialisation, sampled controllers with
//! zero-order hold, fixed-step integration and recording.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use log::warn;

use super::disturbance::DisturbanceSignal;
use super::integrator::rk4_step;
use super::SimError;
use crate::control::{
    area_control, component_control, compose_control, conventional_agc_step, distribute_share, lemma1_condition,
    lqr_integrator_gain, system_control, AreaMeasurement, ConventionalAgcParams, LqrGain, LqrWeights,
};
use crate::intv::{component_intv_rate, layer_rates};
use crate::network::{
    bus_voltage, electrical_powers, phasor_equilibrium, power_balance, system_deriv, DisturbanceSpec, NetworkError,
    NetworkInputs, SystemState, Topology,
};

/// Any state entry beyond this magnitude counts as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControllerKind {
    /// Governor droop only, `u_AGC ≡ 0`.
    Primary,
    /// Integral-of-ACE baseline.
    Conventional,
    /// Component cancellation plus area and system LQR coordination.
    Eagc,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [Self::Primary, Self::Conventional, Self::Eagc];

    pub fn name(self) -> &'static str {
        match self {
            Self::Primary => "primary",
            Self::Conventional => "conventional",
            Self::Eagc => "eagc",
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControllerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "primary" => Ok(Self::Primary),
            "conventional" => Ok(Self::Conventional),
            "eagc" => Ok(Self::Eagc),
            other => Err(format!(
                "unknown controller '{other}' (expected primary, conventional or eagc)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub dt: f64,
    pub horizon: f64,
    pub control_dt: f64,
    pub record_dt: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            dt: 2e-4,
            horizon: 40.0,
            control_dt: 0.01,
            record_dt: 0.01,
        }
    }
}

fn ratio(a: f64, b: f64, what: &str) -> Result<usize, SimError> {
    let n = a / b;
    let r = n.round();
    if r < 1.0 || (n - r).abs() > 1e-6 * r {
        return Err(SimError::Config(format!("{what} must be an integer multiple of dt")));
    }
    Ok(r as usize)
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let SolverConfig {
            dt,
            horizon,
            control_dt,
            record_dt,
        } = *self;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(SimError::Config(format!("dt = {dt} must be > 0")));
        }
        if !(dt <= control_dt && control_dt <= record_dt) {
            return Err(SimError::Config(format!(
                "need dt <= control_dt <= record_dt (got {dt}, {control_dt}, {record_dt})"
            )));
        }
        if !(record_dt <= horizon && horizon.is_finite()) {
            return Err(SimError::HorizonTooShort {
                horizon,
                needed: record_dt,
            });
        }
        self.steps_per_control()?;
        self.steps_per_record()?;
        Ok(())
    }

    pub fn steps_per_control(&self) -> Result<usize, SimError> {
        ratio(self.control_dt, self.dt, "control_dt")
    }

    pub fn steps_per_record(&self) -> Result<usize, SimError> {
        ratio(self.record_dt, self.dt, "record_dt")
    }

    pub fn total_steps(&self) -> usize {
        (self.horizon / self.dt + 1e-9).floor() as usize
    }

    /// Number of rows in a recorded trajectory.
    pub fn record_count(&self) -> usize {
        (self.horizon / self.record_dt + 1e-9).floor() as usize + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Initialization {
    /// Phasor steady state at the given rotor angles; `P_m_ref` of every
    /// generator is set to its electrical power there.
    Equilibrium { angles: Vec<f64> },
    /// Zero currents and shunt voltages, nominal speeds, then `settle_time`
    /// seconds of undisturbed droop-only simulation.
    FlatSettle { angles: Vec<f64>, settle_time: f64 },
    /// Component states given verbatim.
    Explicit(SystemState),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EagcConfig {
    /// One weight set per area, participants in the area's generator order.
    pub area_weights: Vec<LqrWeights>,
    /// Participants are the areas.
    pub system_weights: LqrWeights,
    /// Split of an area's system-level share across its generators.
    pub share_split: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConventionalConfig {
    /// `None` uses the aggregate `Σ (D + 1/r)` of each area.
    pub bias: Option<Vec<f64>>,
    pub k_i: f64,
    pub participation: Option<Vec<f64>>,
    /// `None` schedules the interchange found at `t = 0`.
    pub tie_schedule: Option<Vec<f64>>,
}

impl Default for ConventionalConfig {
    fn default() -> Self {
        Self {
            bias: None,
            k_i: 0.1,
            participation: None,
            tie_schedule: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub topology: Topology,
    pub disturbances: Vec<DisturbanceSpec>,
    pub solver: SolverConfig,
    pub initialization: Initialization,
    pub eagc: EagcConfig,
    pub conventional: ConventionalConfig,
    /// Offsets every filtered-noise seed.
    pub seed: u64,
}

impl Scenario {
    /// Area LQR gains followed by the system gain.
    pub fn gains(&self) -> Result<(Vec<LqrGain>, LqrGain), SimError> {
        let areas = self.topology.areas();
        if self.eagc.area_weights.len() != areas.len() {
            return Err(SimError::Config(format!(
                "need {} area weight sets, got {}",
                areas.len(),
                self.eagc.area_weights.len()
            )));
        }
        let area = areas
            .iter()
            .zip(&self.eagc.area_weights)
            .map(|(a, w)| lqr_integrator_gain(w, a.generators.len()))
            .collect::<Result<Vec<_>, _>>()?;
        let system = lqr_integrator_gain(&self.eagc.system_weights, areas.len())?;
        Ok((area, system))
    }

    fn signals(&self) -> Vec<(usize, DisturbanceSignal)> {
        self.disturbances
            .iter()
            .map(|d| {
                let mut d = d.clone();
                if let crate::network::DisturbanceKind::FilteredNoise { seed, .. } = &mut d.kind {
                    *seed = seed.wrapping_add(self.seed);
                }
                (d.bus, DisturbanceSignal::new(&d, self.solver.horizon))
            })
            .collect()
    }

    /// Start of the post-disturbance analysis window.
    pub fn last_disturbance_start(&self) -> f64 {
        self.disturbances.iter().map(|d| d.start).fold(0.0, f64::max)
    }
}

/// Conventional AGC parameters with scenario defaults filled in.
pub fn resolve_conventional(
    cfg: &ConventionalConfig,
    topo: &Topology,
    initial_tie_flows: &[f64],
) -> Result<ConventionalAgcParams, SimError> {
    let areas = topo.areas();
    let gens = topo.generators();
    let bias = cfg.bias.clone().unwrap_or_else(|| {
        areas
            .iter()
            .map(|a| {
                a.generators
                    .iter()
                    .map(|&g| gens[g].params.d + 1.0 / gens[g].params.r)
                    .sum()
            })
            .collect()
    });
    let participation = cfg.participation.clone().unwrap_or_else(|| equal_split(topo));
    let tie_schedule = cfg.tie_schedule.clone().unwrap_or_else(|| initial_tie_flows.to_vec());
    let params = ConventionalAgcParams {
        bias,
        k_i: cfg.k_i,
        participation,
        tie_schedule,
    };
    params.validate(areas, gens.len())?;
    Ok(params)
}

/// `1 / N` for each generator of an `N`-generator area.
pub fn equal_split(topo: &Topology) -> Vec<f64> {
    let mut w = vec![0.0; topo.generators().len()];
    for a in topo.areas() {
        for &g in &a.generators {
            w[g] = 1.0 / a.generators.len() as f64;
        }
    }
    w
}

/// Net real-power export of every area over its tie lines, measured at the
/// area-side bus.
pub fn tie_flows(state: &SystemState, topo: &Topology) -> Result<Vec<f64>, NetworkError> {
    let mut flows = vec![0.0; topo.areas().len()];
    for k in topo.tie_lines() {
        let p = topo.lines()[k].params;
        let i = state.lines[k];
        let from = topo.buses()[p.from_bus].area;
        let to = topo.buses()[p.to_bus].area;
        flows[from] += bus_voltage(p.from_bus, state, topo)?.power(i);
        flows[to] -= bus_voltage(p.to_bus, state, topo)?.power(i);
    }
    Ok(flows)
}

/// Resolve the starting point. Returns the topology with any
/// initialisation-dependent parameters applied (equilibrium `P_m_ref`).
pub fn initial_condition(topo: &Topology, init: &Initialization, dt: f64) -> Result<(Topology, SystemState), SimError> {
    let mut topo = topo.clone();
    let zero_draws = vec![0.0; topo.buses().len()];
    let state = match init {
        Initialization::Equilibrium { angles } => {
            let (state, p_e) = phasor_equilibrium(&topo, angles, &zero_draws)?;
            for (g, pe) in p_e.into_iter().enumerate() {
                let mut p = topo.generators()[g].params;
                p.p_m_ref = pe;
                topo.set_generator_params(g, p)?;
            }
            state
        }
        Initialization::FlatSettle { angles, settle_time } => {
            if angles.len() != topo.generators().len() {
                return Err(SimError::Config("one initial angle per generator required".into()));
            }
            let mut state = topo.zero_state();
            for (g, unit) in topo.generators().iter().enumerate() {
                state.generators[g].delta = angles[g];
                state.generators[g].omega = unit.params.omega_ref;
            }
            let mut x = state.to_vec();
            let controls = vec![0.0; topo.generators().len()];
            let steps = (settle_time / dt).round() as usize;
            let mut scratch = topo.zero_state();
            for k in 0..steps {
                x = rk4_step(
                    |_, y| {
                        scratch.read_from(y)?;
                        let d = system_deriv(
                            &scratch,
                            &NetworkInputs {
                                controls: &controls,
                                bus_draws: &zero_draws,
                            },
                            &topo,
                        )?;
                        Ok::<_, NetworkError>(d.to_vec())
                    },
                    &x,
                    k as f64 * dt,
                    dt,
                )?;
            }
            state.read_from(&x)?;
            state.z_c.iter_mut().for_each(|z| *z = 0.0);
            state.z_r.iter_mut().for_each(|z| *z = 0.0);
            state.z_s = 0.0;
            state
        }
        Initialization::Explicit(s) => {
            if s.dim() != topo.zero_state().dim() || !s.is_finite() {
                return Err(SimError::Config(
                    "explicit initial state does not match topology".into(),
                ));
            }
            s.clone()
        }
    };
    Ok((topo, state))
}

/// Summary values that do not fit the uniform recording grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RunDiagnostics {
    /// Largest `|ż_c|` obtained from the component-level law alone, over
    /// every control step (E-AGC only; zero otherwise).
    pub max_cancellation_residual: f64,
    pub control_steps: usize,
    pub saturation_events: usize,
    pub lemma1_violations: usize,
    /// Per generator `∫ u² dt` of the applied input.
    pub control_energy: Vec<f64>,
    /// Per generator `∫ u_r² dt` (area layer).
    pub area_energy: Vec<f64>,
    /// Per generator `∫ u_s² dt` (system layer share).
    pub system_energy: Vec<f64>,
    /// Largest relative residual of the power bookkeeping over recorded steps.
    pub max_power_residual: f64,
}

/// Uniformly sampled record of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub controller: ControllerKind,
    pub record_dt: f64,
    /// Start of the post-disturbance window.
    pub analysis_start: f64,
    pub time: Vec<f64>,
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
    pub generator_ids: Vec<String>,
    pub area_ids: Vec<String>,
    /// Generator -> area index.
    pub generator_area: Vec<usize>,
    pub omega_ref: Vec<f64>,
    pub diagnostics: RunDiagnostics,
    index: HashMap<String, usize>,
}

impl Trajectory {
    pub fn series(&self, name: &str) -> Option<&[f64]> {
        self.index.get(name).map(|&i| self.columns[i].as_slice())
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }
}

struct Recorder {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
}

impl Recorder {
    fn new(topo: &Topology) -> Self {
        let mut names = Vec::new();
        for g in topo.generators() {
            for f in ["delta", "omega", "p_m", "a", "p_e"] {
                names.push(format!("gen.{}.{f}", g.id));
            }
        }
        for l in topo.loads() {
            names.push(format!("load.{}.i_d", l.id));
            names.push(format!("load.{}.i_q", l.id));
        }
        for l in topo.lines() {
            names.push(format!("line.{}.i_d", l.id));
            names.push(format!("line.{}.i_q", l.id));
        }
        for &b in topo.capacitor_buses() {
            let id = &topo.buses()[b].id;
            names.push(format!("bus.{id}.v_d"));
            names.push(format!("bus.{id}.v_q"));
        }
        for g in topo.generators() {
            names.push(format!("z_c.{}", g.id));
        }
        for a in topo.areas() {
            names.push(format!("z_r.{}", a.id));
        }
        names.push("z_s".into());
        for g in topo.generators() {
            names.push(format!("z_c_dot.{}", g.id));
        }
        for a in topo.areas() {
            names.push(format!("z_r_dot.{}", a.id));
        }
        names.push("z_s_dot".into());
        for g in topo.generators() {
            for f in ["c", "r", "s", "total"] {
                names.push(format!("u.{}.{f}", g.id));
            }
        }
        for g in topo.generators() {
            names.push(format!("lemma1_margin.{}", g.id));
        }
        names.push("power_residual".into());
        let columns = vec![Vec::new(); names.len()];
        Self { names, columns }
    }

    fn push(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.columns.len());
        for (c, v) in self.columns.iter_mut().zip(row) {
            c.push(*v);
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Held {
    c: Vec<f64>,
    r: Vec<f64>,
    s: Vec<f64>,
    total: Vec<f64>,
}

struct Measurement {
    p_e: Vec<f64>,
    draws: Vec<f64>,
}

fn bus_draws(signals: &[(usize, DisturbanceSignal)], n_buses: usize, t: f64, t_hold: f64) -> Vec<f64> {
    let mut d = vec![0.0; n_buses];
    for (bus, s) in signals {
        d[*bus] += if s.is_piecewise_constant() {
            s.value(t_hold)
        } else {
            s.value(t)
        };
    }
    d
}

/// Names of the flat state entries, in `SystemState::to_vec` order.
pub fn state_names(topo: &Topology) -> Vec<String> {
    let mut names = Vec::new();
    for g in topo.generators() {
        for f in ["delta", "omega", "p_m", "a"] {
            names.push(format!("gen.{}.{f}", g.id));
        }
    }
    for l in topo.loads() {
        names.push(format!("load.{}.i_d", l.id));
        names.push(format!("load.{}.i_q", l.id));
    }
    for l in topo.lines() {
        names.push(format!("line.{}.i_d", l.id));
        names.push(format!("line.{}.i_q", l.id));
    }
    for &b in topo.capacitor_buses() {
        let id = &topo.buses()[b].id;
        names.push(format!("bus.{id}.v_d"));
        names.push(format!("bus.{id}.v_q"));
    }
    for g in topo.generators() {
        names.push(format!("z_c.{}", g.id));
    }
    for a in topo.areas() {
        names.push(format!("z_r.{}", a.id));
    }
    names.push("z_s".into());
    names
}

fn check_divergence(x: &[f64], t: f64, topo: &Topology) -> Result<(), SimError> {
    if let Some(i) = x.iter().position(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
        let what = state_names(topo)
            .get(i)
            .cloned()
            .unwrap_or_else(|| format!("state[{i}]"));
        return Err(SimError::Diverged { t, what, value: x[i] });
    }
    Ok(())
}

/// Integrate the scenario under the selected controller.
pub fn run_scenario(scenario: &Scenario, controller: ControllerKind) -> Result<Trajectory, SimError> {
    let solver = scenario.solver;
    solver.validate()?;
    let (topo, mut state) = initial_condition(&scenario.topology, &scenario.initialization, solver.dt)?;
    let n_gen = topo.generators().len();
    let n_bus = topo.buses().len();
    let areas = topo.areas().to_vec();
    let signals = scenario.signals();

    let steps_per_control = solver.steps_per_control()?;
    let steps_per_record = solver.steps_per_record()?;
    let total_steps = solver.total_steps();
    let dt = solver.dt;
    let control_dt = steps_per_control as f64 * dt;

    let (area_gains, system_gain) = match controller {
        ControllerKind::Eagc => {
            let (a, s) = scenario.gains()?;
            if scenario.eagc.share_split.len() != n_gen {
                return Err(SimError::Config("share split needs one entry per generator".into()));
            }
            (a, Some(s))
        }
        _ => (Vec::new(), None),
    };
    let conventional = match controller {
        ControllerKind::Conventional => Some(resolve_conventional(
            &scenario.conventional,
            &topo,
            &tie_flows(&state, &topo)?,
        )?),
        _ => None,
    };
    let mut ace_integral = vec![0.0; areas.len()];

    let mut held = Held {
        c: vec![0.0; n_gen],
        r: vec![0.0; n_gen],
        s: vec![0.0; n_gen],
        total: vec![0.0; n_gen],
    };
    let mut diag = RunDiagnostics {
        max_cancellation_residual: 0.0,
        control_steps: 0,
        saturation_events: 0,
        lemma1_violations: 0,
        control_energy: vec![0.0; n_gen],
        area_energy: vec![0.0; n_gen],
        system_energy: vec![0.0; n_gen],
        max_power_residual: 0.0,
    };
    let mut warned = vec![false; n_gen];
    let mut recorder = Recorder::new(&topo);
    let mut time = Vec::with_capacity(solver.record_count());
    let mut x = state.to_vec();
    let mut scratch = topo.zero_state();
    let mut row = Vec::with_capacity(recorder.names.len());

    let measure = |state: &SystemState, t: f64| -> Result<Measurement, SimError> {
        let draws = bus_draws(&signals, n_bus, t, t + 0.5 * dt);
        let p_e = electrical_powers(state, &topo, &draws)?;
        Ok(Measurement { p_e, draws })
    };

    for k in 0..=total_steps {
        let t = k as f64 * dt;
        state.read_from(&x)?;

        if k % steps_per_control == 0 && k < total_steps {
            let m = measure(&state, t)?;
            diag.control_steps += 1;
            match controller {
                ControllerKind::Primary => {}
                ControllerKind::Conventional => {
                    let params = conventional.as_ref().expect("resolved above");
                    let flows = tie_flows(&state, &topo)?;
                    let meas: Vec<AreaMeasurement> = areas
                        .iter()
                        .enumerate()
                        .map(|(a, area)| {
                            let dw = area
                                .generators
                                .iter()
                                .map(|&g| state.generators[g].omega - topo.generators()[g].params.omega_ref)
                                .sum::<f64>()
                                / area.generators.len() as f64;
                            AreaMeasurement {
                                delta_omega: dw,
                                tie_flow: flows[a],
                            }
                        })
                        .collect();
                    let step = conventional_agc_step(&meas, params, &areas, &ace_integral, control_dt)?;
                    ace_integral = step.integral;
                    for g in 0..n_gen {
                        let u_max = topo.generators()[g].params.u_max;
                        let c = compose_control(0.0, step.u[g], 0.0, u_max);
                        held.r[g] = step.u[g];
                        held.total[g] = c.value;
                        diag.saturation_events += c.saturated as usize;
                    }
                }
                ControllerKind::Eagc => {
                    let gains = system_gain.as_ref().expect("computed above");
                    let u_s_area = system_control(state.z_s, gains);
                    for (a, area) in areas.iter().enumerate() {
                        let members = &area.generators;
                        let mut headroom = Vec::with_capacity(members.len());
                        for &g in members {
                            let p = &topo.generators()[g].params;
                            let u_c = component_control(m.p_e[g], p.p_m_ref, p);
                            let residual = component_intv_rate(p.p_m_ref, m.p_e[g], u_c, p).abs();
                            diag.max_cancellation_residual = diag.max_cancellation_residual.max(residual);
                            held.c[g] = u_c;
                            headroom.push((p.u_max - u_c.abs()).max(0.0));
                        }
                        let u_r = area_control(state.z_r[a], &area_gains[a], Some(&headroom))?;
                        let split: Vec<f64> = members.iter().map(|&g| scenario.eagc.share_split[g]).collect();
                        let u_s = distribute_share(u_s_area[a], &split);
                        for (j, &g) in members.iter().enumerate() {
                            let u_max = topo.generators()[g].params.u_max;
                            let c = compose_control(held.c[g], u_r[j], u_s[j], u_max);
                            held.r[g] = u_r[j];
                            held.s[g] = u_s[j];
                            held.total[g] = c.value;
                            diag.saturation_events += c.saturated as usize;
                        }
                    }
                }
            }
            #[allow(clippy::needless_range_loop)]
            for g in 0..n_gen {
                let p = &topo.generators()[g].params;
                if !lemma1_condition(m.p_e[g], p.p_m_ref, p).holds {
                    diag.lemma1_violations += 1;
                    if !warned[g] {
                        warned[g] = true;
                        warn!(
                            "t = {t:.3} s: generator {} outside its saturation-feasible region",
                            topo.generators()[g].id
                        );
                    }
                }
                let interval = (control_dt).min(solver.horizon - t).max(0.0);
                diag.control_energy[g] += held.total[g] * held.total[g] * interval;
                diag.area_energy[g] += held.r[g] * held.r[g] * interval;
                diag.system_energy[g] += held.s[g] * held.s[g] * interval;
            }
        }

        if k % steps_per_record == 0 {
            let m = measure(&state, t)?;
            let inputs = NetworkInputs {
                controls: &held.total,
                bus_draws: &m.draws,
            };
            let deriv = system_deriv(&state, &inputs, &topo)?;
            let residual = power_balance(&state, &deriv, &topo, &m.draws)?.relative_residual();
            diag.max_power_residual = diag.max_power_residual.max(residual);
            let rates = layer_rates(&topo, &m.p_e, &held.total);

            row.clear();
            for (g, s) in state.generators.iter().enumerate() {
                row.extend_from_slice(&[s.delta, s.omega, s.p_m, s.a, m.p_e[g]]);
            }
            for i in state.loads.iter().chain(&state.lines) {
                row.extend_from_slice(&[i.d, i.q]);
            }
            for v in &state.buses {
                row.extend_from_slice(&[v.d, v.q]);
            }
            row.extend_from_slice(&state.z_c);
            row.extend_from_slice(&state.z_r);
            row.push(state.z_s);
            row.extend_from_slice(&rates.z_c_dot);
            row.extend_from_slice(&rates.z_r_dot);
            row.push(rates.z_s_dot);
            for g in 0..n_gen {
                row.extend_from_slice(&[held.c[g], held.r[g], held.s[g], held.total[g]]);
            }
            for g in 0..n_gen {
                let p = &topo.generators()[g].params;
                row.push(lemma1_condition(m.p_e[g], p.p_m_ref, p).margin);
            }
            row.push(residual);
            recorder.push(&row);
            time.push(t);
        }

        if k == total_steps {
            break;
        }
        let t_hold = t + 0.5 * dt;
        let controls = &held.total;
        x = rk4_step(
            |ts, y| {
                scratch.read_from(y)?;
                let draws = bus_draws(&signals, n_bus, ts, t_hold);
                let d = system_deriv(
                    &scratch,
                    &NetworkInputs {
                        controls,
                        bus_draws: &draws,
                    },
                    &topo,
                )
                .map_err(|source| SimError::Network { t: ts, source })?;
                Ok::<_, SimError>(d.to_vec())
            },
            &x,
            t,
            dt,
        )?;
        check_divergence(&x, t + dt, &topo)?;
    }

    let Recorder { names, columns } = recorder;
    let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    Ok(Trajectory {
        controller,
        record_dt: steps_per_record as f64 * dt,
        analysis_start: scenario.last_disturbance_start(),
        time,
        names,
        columns,
        generator_ids: topo.generators().iter().map(|g| g.id.clone()).collect(),
        area_ids: areas.iter().map(|a| a.id.clone()).collect(),
        generator_area: (0..n_gen).map(|g| topo.generator_area(g)).collect(),
        omega_ref: topo.generators().iter().map(|g| g.params.omega_ref).collect(),
        diagnostics: diag,
        index,
    })
}
