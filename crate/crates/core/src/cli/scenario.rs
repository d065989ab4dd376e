//! Scenario documents: TOML schema, validation and conversion into a
//! runnable [`Scenario`].

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{ControlError, LqrWeights};
use crate::models::{DqCurrent, DqVoltage, GeneratorParams, GeneratorState, LineParams, LoadParams};
use crate::network::{
    Area, Bus, DisturbanceKind, DisturbanceSpec, GeneratorUnit, Line, LoadUnit, NetworkError, Topology,
};
use crate::sim::{ControllerKind, ConventionalConfig, EagcConfig, Initialization, Scenario, SolverConfig};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: syntax error: {message}")]
    Syntax {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}:{line}: schema error: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{field}: unknown {kind} '{id}'")]
    Dangling {
        field: String,
        kind: &'static str,
        id: String,
    },
    #[error("{field}: weights are not positive definite ({source})")]
    NotPositiveDefinite {
        field: String,
        #[source]
        source: ControlError,
    },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

impl ScenarioError {
    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }

    fn dangling(field: impl Into<String>, kind: &'static str, id: &str) -> Self {
        Self::Dangling {
            field: field.into(),
            kind,
            id: id.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub base_power_mva: f64,
    pub base_frequency_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusDoc {
    pub id: String,
    pub area: String,
    /// Terminal voltage magnitude of a generator bus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_mag: Option<f64>,
    /// Shunt capacitance (pu·s) of a non-generator bus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shunt_c: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorDoc {
    pub id: String,
    pub bus: String,
    #[serde(default)]
    pub initial_angle: f64,
    pub m: f64,
    pub d: f64,
    pub k_t: f64,
    pub t_u: f64,
    pub t_g: f64,
    pub r: f64,
    pub u_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_ref: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_m_ref: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valve_limits: Option<[f64; 2]>,
}

impl GeneratorDoc {
    pub fn params(&self) -> GeneratorParams {
        GeneratorParams {
            m: self.m,
            d: self.d,
            k_t: self.k_t,
            t_u: self.t_u,
            t_g: self.t_g,
            r: self.r,
            omega_0: self.omega_0.unwrap_or(1.0),
            omega_ref: self.omega_ref.unwrap_or(1.0),
            p_m_ref: self.p_m_ref.unwrap_or(0.0),
            u_max: self.u_max,
            valve_limits: self.valve_limits,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadDoc {
    pub id: String,
    pub bus: String,
    pub r: f64,
    pub l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineDoc {
    pub id: String,
    pub from: String,
    pub to: String,
    pub r: f64,
    pub l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AreaDoc {
    pub id: String,
    pub generators: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceKindDoc {
    Step,
    Sinusoid,
    FilteredNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceDoc {
    pub id: String,
    /// Bus id, or a load id (resolved to the load's bus).
    pub target: String,
    pub kind: DisturbanceKindDoc,
    /// Conductance-like draw (pu at 1 pu voltage); negative injects power.
    pub amplitude: f64,
    #[serde(default)]
    pub start: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corner_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// `Q` plus either the diagonal of `R` or the full matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsDoc {
    pub q: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_matrix: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AreaWeightsDoc {
    pub area: String,
    pub q: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_matrix: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EagcDoc {
    pub areas: Vec<AreaWeightsDoc>,
    pub system: WeightsDoc,
    /// Generator id -> fraction of its area's system-level share.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub share_split: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConventionalDoc {
    #[serde(default = "default_k_i")]
    pub k_i: f64,
    /// Area id -> frequency bias.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub bias: BTreeMap<String, f64>,
    /// Generator id -> participation factor.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub participation: BTreeMap<String, f64>,
    /// Area id -> scheduled net export.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tie_schedule: BTreeMap<String, f64>,
}

fn default_k_i() -> f64 {
    0.1
}

impl Default for ConventionalDoc {
    fn default() -> Self {
        Self {
            k_i: default_k_i(),
            bias: BTreeMap::new(),
            participation: BTreeMap::new(),
            tie_schedule: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerDoc {
    pub selection: String,
    pub eagc: EagcDoc,
    #[serde(default)]
    pub conventional: ConventionalDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverDoc {
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub horizon: f64,
    #[serde(default = "default_control_dt")]
    pub control_dt: f64,
    #[serde(default = "default_control_dt")]
    pub record_dt: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_dt() -> f64 {
    2e-4
}

fn default_control_dt() -> f64 {
    0.01
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    Equilibrium,
    FlatSettle,
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorStateDoc {
    pub id: String,
    pub delta: f64,
    pub omega: f64,
    pub p_m: f64,
    pub a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurrentDoc {
    pub id: String,
    pub i_d: f64,
    pub i_q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoltageDoc {
    pub id: String,
    pub v_d: f64,
    pub v_q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitializationDoc {
    pub method: InitMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub settle_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub generators: Vec<GeneratorStateDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loads: Vec<CurrentDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lines: Vec<CurrentDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub buses: Vec<VoltageDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDocument {
    pub metadata: Metadata,
    pub buses: Vec<BusDoc>,
    pub generators: Vec<GeneratorDoc>,
    #[serde(default)]
    pub loads: Vec<LoadDoc>,
    #[serde(default)]
    pub lines: Vec<LineDoc>,
    pub areas: Vec<AreaDoc>,
    #[serde(default)]
    pub disturbances: Vec<DisturbanceDoc>,
    pub controller: ControllerDoc,
    pub solver: SolverDoc,
    pub initialization: InitializationDoc,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |p| before.len() - p - 1) + 1;
    (line, column)
}

/// Read, parse and fully validate a scenario file.
pub fn parse_scenario(path: &Path) -> Result<ScenarioDocument, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let doc = parse_scenario_str(&text, path)?;
    doc.build()?;
    Ok(doc)
}

/// Syntax and schema checks only; `path` is used for messages.
pub fn parse_scenario_str(text: &str, path: &Path) -> Result<ScenarioDocument, ScenarioError> {
    if let Err(e) = toml::from_str::<toml::Table>(text) {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        return Err(ScenarioError::Syntax {
            path: path.to_path_buf(),
            line,
            column,
            message: e.message().trim().to_string(),
        });
    }
    toml::from_str::<ScenarioDocument>(text).map_err(|e| ScenarioError::Schema {
        path: path.to_path_buf(),
        line: e.span().map_or(0, |s| line_col(text, s.start).0),
        message: e.message().trim().to_string(),
    })
}

fn index_of<'a>(ids: impl Iterator<Item = &'a String>) -> HashMap<&'a str, usize> {
    ids.enumerate().map(|(i, id)| (id.as_str(), i)).collect()
}

fn check_unique<'a>(what: &str, ids: impl Iterator<Item = &'a String>) -> Result<(), ScenarioError> {
    let mut seen = std::collections::HashSet::new();
    for (i, id) in ids.enumerate() {
        if !seen.insert(id) {
            return Err(ScenarioError::invalid(
                format!("{what}[{i}].id"),
                format!("duplicate id '{id}'"),
            ));
        }
    }
    Ok(())
}

fn weights(
    field: &str,
    q: f64,
    r: &Option<Vec<f64>>,
    r_matrix: &Option<Vec<Vec<f64>>>,
    n: usize,
) -> Result<LqrWeights, ScenarioError> {
    let w = match (r, r_matrix) {
        (Some(diag), None) => LqrWeights::diagonal(q, diag),
        (None, Some(rows)) => {
            if rows.iter().any(|row| row.len() != rows.len()) {
                return Err(ScenarioError::invalid(format!("{field}.r_matrix"), "must be square"));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            LqrWeights {
                q,
                r: nalgebra::DMatrix::from_row_slice(rows.len(), rows.len(), &flat),
            }
        }
        _ => {
            return Err(ScenarioError::invalid(
                field,
                "give exactly one of 'r' (diagonal) or 'r_matrix'",
            ))
        }
    };
    if w.participants() != n {
        return Err(ScenarioError::invalid(
            field,
            format!("R has {} participants, expected {n}", w.participants()),
        ));
    }
    w.validate().map_err(|source| ScenarioError::NotPositiveDefinite {
        field: field.to_string(),
        source,
    })?;
    Ok(w)
}

fn network_error(e: NetworkError) -> ScenarioError {
    ScenarioError::invalid("topology", e.to_string())
}

impl ScenarioDocument {
    pub fn controller_selection(&self) -> Result<ControllerKind, ScenarioError> {
        self.controller
            .selection
            .parse()
            .map_err(|m: String| ScenarioError::invalid("controller.selection", m))
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            dt: self.solver.dt,
            horizon: self.solver.horizon,
            control_dt: self.solver.control_dt,
            record_dt: self.solver.record_dt,
        }
    }

    /// Canonical TOML text; parsing it yields an equal document.
    pub fn to_canonical_string(&self) -> String {
        toml::to_string(self).expect("scenario documents are always representable")
    }

    /// Resolve every reference and check every invariant.
    pub fn build(&self) -> Result<Scenario, ScenarioError> {
        let m = &self.metadata;
        if !(m.base_power_mva > 0.0 && m.base_frequency_hz > 0.0) {
            return Err(ScenarioError::invalid("metadata", "per-unit bases must be > 0"));
        }
        self.controller_selection()?;
        check_unique("buses", self.buses.iter().map(|b| &b.id))?;
        check_unique("generators", self.generators.iter().map(|g| &g.id))?;
        check_unique("loads", self.loads.iter().map(|l| &l.id))?;
        check_unique("lines", self.lines.iter().map(|l| &l.id))?;
        check_unique("areas", self.areas.iter().map(|a| &a.id))?;
        check_unique("disturbances", self.disturbances.iter().map(|d| &d.id))?;

        let bus_ix = index_of(self.buses.iter().map(|b| &b.id));
        let gen_ix = index_of(self.generators.iter().map(|g| &g.id));
        let load_ix = index_of(self.loads.iter().map(|l| &l.id));
        let line_ix = index_of(self.lines.iter().map(|l| &l.id));
        let area_ix = index_of(self.areas.iter().map(|a| &a.id));
        let bus = |field: String, id: &str| {
            bus_ix
                .get(id)
                .copied()
                .ok_or_else(|| ScenarioError::dangling(field, "bus", id))
        };

        let mut buses = Vec::with_capacity(self.buses.len());
        for (i, b) in self.buses.iter().enumerate() {
            let area = *area_ix
                .get(b.area.as_str())
                .ok_or_else(|| ScenarioError::dangling(format!("buses[{i}].area"), "area", &b.area))?;
            buses.push(Bus {
                id: b.id.clone(),
                generator: None,
                load: None,
                shunt_c: b.shunt_c,
                v_mag: b.v_mag.unwrap_or(0.0),
                area,
            });
        }
        let mut generators = Vec::with_capacity(self.generators.len());
        for (i, g) in self.generators.iter().enumerate() {
            let b = bus(format!("generators[{i}].bus"), &g.bus)?;
            if buses[b].generator.replace(i).is_some() {
                return Err(ScenarioError::invalid(
                    format!("generators[{i}].bus"),
                    format!("bus '{}' already hosts a generator", g.bus),
                ));
            }
            if self.buses[b].v_mag.is_none() {
                return Err(ScenarioError::invalid(
                    format!("buses[{b}].v_mag"),
                    format!("generator bus '{}' needs a voltage magnitude", g.bus),
                ));
            }
            let params = g.params();
            params
                .validate()
                .map_err(|e| ScenarioError::invalid(format!("generators[{i}]"), e.to_string()))?;
            generators.push(GeneratorUnit {
                id: g.id.clone(),
                bus: b,
                params,
            });
        }
        let mut loads = Vec::with_capacity(self.loads.len());
        for (i, l) in self.loads.iter().enumerate() {
            let b = bus(format!("loads[{i}].bus"), &l.bus)?;
            if buses[b].load.replace(i).is_some() {
                return Err(ScenarioError::invalid(
                    format!("loads[{i}].bus"),
                    format!("bus '{}' already hosts a load", l.bus),
                ));
            }
            let params = LoadParams { r: l.r, l: l.l };
            params
                .validate()
                .map_err(|e| ScenarioError::invalid(format!("loads[{i}]"), e.to_string()))?;
            loads.push(LoadUnit {
                id: l.id.clone(),
                bus: b,
                params,
            });
        }
        let mut lines = Vec::with_capacity(self.lines.len());
        for (i, l) in self.lines.iter().enumerate() {
            let params = LineParams {
                r: l.r,
                l: l.l,
                from_bus: bus(format!("lines[{i}].from"), &l.from)?,
                to_bus: bus(format!("lines[{i}].to"), &l.to)?,
            };
            params
                .validate()
                .map_err(|e| ScenarioError::invalid(format!("lines[{i}]"), e.to_string()))?;
            lines.push(Line {
                id: l.id.clone(),
                params,
            });
        }
        let mut areas = Vec::with_capacity(self.areas.len());
        for (i, a) in self.areas.iter().enumerate() {
            let members =
                a.generators
                    .iter()
                    .enumerate()
                    .map(|(j, g)| {
                        gen_ix.get(g.as_str()).copied().ok_or_else(|| {
                            ScenarioError::dangling(format!("areas[{i}].generators[{j}]"), "generator", g)
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
            areas.push(Area {
                id: a.id.clone(),
                generators: members,
            });
        }
        let frame_omega = 2.0 * PI * m.base_frequency_hz;
        let topology = Topology::new(buses, generators, loads, lines, areas, frame_omega).map_err(network_error)?;

        let mut disturbances = Vec::with_capacity(self.disturbances.len());
        for (i, d) in self.disturbances.iter().enumerate() {
            let field = format!("disturbances[{i}]");
            let b = match (bus_ix.get(d.target.as_str()), load_ix.get(d.target.as_str())) {
                (Some(&b), _) => b,
                (None, Some(&l)) => topology.loads()[l].bus,
                _ => {
                    return Err(ScenarioError::dangling(
                        format!("{field}.target"),
                        "bus or load",
                        &d.target,
                    ))
                }
            };
            let need = |v: Option<f64>, name: &str| {
                v.filter(|x| x.is_finite() && *x > 0.0)
                    .ok_or_else(|| ScenarioError::invalid(format!("{field}.{name}"), "required and must be > 0"))
            };
            let kind = match d.kind {
                DisturbanceKindDoc::Step => DisturbanceKind::Step,
                DisturbanceKindDoc::Sinusoid => DisturbanceKind::Sinusoid {
                    frequency_hz: need(d.frequency_hz, "frequency_hz")?,
                },
                DisturbanceKindDoc::FilteredNoise => DisturbanceKind::FilteredNoise {
                    corner_hz: need(d.corner_hz, "corner_hz")?,
                    seed: d.seed.unwrap_or(0),
                },
            };
            if !(d.amplitude.is_finite() && d.start.is_finite() && d.start >= 0.0) {
                return Err(ScenarioError::invalid(field, "amplitude must be finite and start >= 0"));
            }
            disturbances.push(DisturbanceSpec {
                bus: b,
                kind,
                amplitude: d.amplitude,
                start: d.start,
            });
        }

        let eagc = self.eagc_config(&topology, &area_ix, &gen_ix)?;
        let conventional = self.conventional_config(&topology, &area_ix, &gen_ix)?;

        let solver = self.solver_config();
        solver
            .validate()
            .map_err(|e| ScenarioError::invalid("solver", e.to_string()))?;

        let angles: Vec<f64> = self.generators.iter().map(|g| g.initial_angle).collect();
        let init = &self.initialization;
        let initialization = match init.method {
            InitMethod::Equilibrium => Initialization::Equilibrium { angles },
            InitMethod::FlatSettle => {
                let settle_time = init.settle_time.unwrap_or(5.0);
                if !(settle_time.is_finite() && settle_time >= 0.0) {
                    return Err(ScenarioError::invalid("initialization.settle_time", "must be >= 0"));
                }
                Initialization::FlatSettle { angles, settle_time }
            }
            InitMethod::Explicit => {
                Initialization::Explicit(self.explicit_state(&topology, &gen_ix, &load_ix, &line_ix, &bus_ix)?)
            }
        };

        Ok(Scenario {
            name: m.name.clone(),
            topology,
            disturbances,
            solver,
            initialization,
            eagc,
            conventional,
            seed: self.solver.seed,
        })
    }

    fn eagc_config(
        &self,
        topo: &Topology,
        area_ix: &HashMap<&str, usize>,
        gen_ix: &HashMap<&str, usize>,
    ) -> Result<EagcConfig, ScenarioError> {
        let doc = &self.controller.eagc;
        let mut area_weights: Vec<Option<LqrWeights>> = vec![None; topo.areas().len()];
        for (i, w) in doc.areas.iter().enumerate() {
            let field = format!("controller.eagc.areas[{i}]");
            let a = *area_ix
                .get(w.area.as_str())
                .ok_or_else(|| ScenarioError::dangling(format!("{field}.area"), "area", &w.area))?;
            let n = topo.areas()[a].generators.len();
            if area_weights[a]
                .replace(weights(&field, w.q, &w.r, &w.r_matrix, n)?)
                .is_some()
            {
                return Err(ScenarioError::invalid(
                    field,
                    format!("second weight set for area '{}'", w.area),
                ));
            }
        }
        let area_weights = area_weights
            .into_iter()
            .enumerate()
            .map(|(a, w)| {
                w.ok_or_else(|| {
                    ScenarioError::invalid(
                        "controller.eagc.areas",
                        format!("no weights for area '{}'", topo.areas()[a].id),
                    )
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let s = &doc.system;
        let system_weights = weights("controller.eagc.system", s.q, &s.r, &s.r_matrix, topo.areas().len())?;

        let mut share_split = crate::sim::runner::equal_split(topo);
        if !doc.share_split.is_empty() {
            share_split = vec![f64::NAN; topo.generators().len()];
            for (id, &v) in &doc.share_split {
                let g = *gen_ix
                    .get(id.as_str())
                    .ok_or_else(|| ScenarioError::dangling("controller.eagc.share_split", "generator", id))?;
                share_split[g] = v;
            }
            for a in topo.areas() {
                let s: f64 = a.generators.iter().map(|&g| share_split[g]).sum();
                if !(s - 1.0).abs().le(&1e-9) || a.generators.iter().any(|&g| share_split[g] < 0.0) {
                    return Err(ScenarioError::invalid(
                        "controller.eagc.share_split",
                        format!("shares in area '{}' must be >= 0 and sum to 1", a.id),
                    ));
                }
            }
        }
        Ok(EagcConfig {
            area_weights,
            system_weights,
            share_split,
        })
    }

    fn conventional_config(
        &self,
        topo: &Topology,
        area_ix: &HashMap<&str, usize>,
        gen_ix: &HashMap<&str, usize>,
    ) -> Result<ConventionalConfig, ScenarioError> {
        let doc = &self.controller.conventional;
        let field = "controller.conventional";
        if !(doc.k_i.is_finite() && doc.k_i > 0.0) {
            return Err(ScenarioError::invalid(format!("{field}.k_i"), "must be > 0"));
        }
        let per = |map: &BTreeMap<String, f64>,
                   ix: &HashMap<&str, usize>,
                   n: usize,
                   name: &str,
                   kind: &'static str|
         -> Result<Option<Vec<f64>>, ScenarioError> {
            if map.is_empty() {
                return Ok(None);
            }
            let mut v = vec![f64::NAN; n];
            for (id, &x) in map {
                let i = *ix
                    .get(id.as_str())
                    .ok_or_else(|| ScenarioError::dangling(format!("{field}.{name}"), kind, id))?;
                v[i] = x;
            }
            if v.iter().any(|x| x.is_nan()) {
                return Err(ScenarioError::invalid(
                    format!("{field}.{name}"),
                    format!("one entry per {kind} required"),
                ));
            }
            Ok(Some(v))
        };
        let na = topo.areas().len();
        let cfg = ConventionalConfig {
            bias: per(&doc.bias, area_ix, na, "bias", "area")?,
            k_i: doc.k_i,
            participation: per(
                &doc.participation,
                gen_ix,
                topo.generators().len(),
                "participation",
                "generator",
            )?,
            tie_schedule: per(&doc.tie_schedule, area_ix, na, "tie_schedule", "area")?,
        };
        let probe = vec![0.0; na];
        crate::sim::runner::resolve_conventional(&cfg, topo, &probe)
            .map_err(|e| ScenarioError::invalid(field, e.to_string()))?;
        Ok(cfg)
    }

    fn explicit_state(
        &self,
        topo: &Topology,
        gen_ix: &HashMap<&str, usize>,
        load_ix: &HashMap<&str, usize>,
        line_ix: &HashMap<&str, usize>,
        bus_ix: &HashMap<&str, usize>,
    ) -> Result<crate::network::SystemState, ScenarioError> {
        let init = &self.initialization;
        let mut state = topo.zero_state();
        let mut seen = vec![false; topo.generators().len()];
        for (i, g) in init.generators.iter().enumerate() {
            let k = *gen_ix.get(g.id.as_str()).ok_or_else(|| {
                ScenarioError::dangling(format!("initialization.generators[{i}].id"), "generator", &g.id)
            })?;
            state.generators[k] = GeneratorState {
                delta: g.delta,
                omega: g.omega,
                p_m: g.p_m,
                a: g.a,
            };
            seen[k] = true;
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(ScenarioError::invalid(
                "initialization.generators",
                format!("missing state for generator '{}'", topo.generators()[k].id),
            ));
        }
        for (i, l) in init.loads.iter().enumerate() {
            let k = *load_ix
                .get(l.id.as_str())
                .ok_or_else(|| ScenarioError::dangling(format!("initialization.loads[{i}].id"), "load", &l.id))?;
            state.loads[k] = DqCurrent::new(l.i_d, l.i_q);
        }
        for (i, l) in init.lines.iter().enumerate() {
            let k = *line_ix
                .get(l.id.as_str())
                .ok_or_else(|| ScenarioError::dangling(format!("initialization.lines[{i}].id"), "line", &l.id))?;
            state.lines[k] = DqCurrent::new(l.i_d, l.i_q);
        }
        for (i, b) in init.buses.iter().enumerate() {
            let k = *bus_ix
                .get(b.id.as_str())
                .ok_or_else(|| ScenarioError::dangling(format!("initialization.buses[{i}].id"), "bus", &b.id))?;
            let slot = topo.capacitor_buses().iter().position(|&c| c == k).ok_or_else(|| {
                ScenarioError::invalid(
                    format!("initialization.buses[{i}]"),
                    format!("'{}' is a generator bus", b.id),
                )
            })?;
            state.buses[slot] = DqVoltage::new(b.v_d, b.v_q);
        }
        if !state.is_finite() {
            return Err(ScenarioError::invalid(
                "initialization",
                "explicit states must be finite",
            ));
        }
        Ok(state)
    }
}
