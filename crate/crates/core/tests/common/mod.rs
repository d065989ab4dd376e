#![allow(dead_code)]

use std::path::PathBuf;

use eagc_sim::cli::scenario::{parse_scenario, DisturbanceKindDoc, ScenarioDocument};

pub fn fivebus_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios/fivebus.scenario")
}

pub fn fivebus() -> ScenarioDocument {
    parse_scenario(&fivebus_path()).expect("bundled scenario parses")
}

/// The reference scenario with the filtered-noise term removed.
pub fn fivebus_smooth() -> ScenarioDocument {
    let mut doc = fivebus();
    doc.disturbances.retain(|d| d.kind != DisturbanceKindDoc::FilteredNoise);
    doc
}

pub fn fivebus_quiet() -> ScenarioDocument {
    let mut doc = fivebus();
    doc.disturbances.clear();
    doc
}

pub fn with_horizon(mut doc: ScenarioDocument, horizon: f64) -> ScenarioDocument {
    doc.solver.horizon = horizon;
    doc
}

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_eagc-sim"))
}
