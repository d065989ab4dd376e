//! Command-line surface: scenario validation, simulation, comparison,
//! gain inspection and stability summaries.

pub mod output;
pub mod scenario;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};
use thiserror::Error;

use crate::sim::{compute_metrics, run_scenario, ControllerKind, MetricsReport, SimError, Trajectory};
use output::{read_csv, write_outputs, OutputError, RunMeta};
use scenario::{parse_scenario, ScenarioDocument, ScenarioError};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_VALIDATION: u8 = 3;
pub const EXIT_DIVERGENCE: u8 = 4;
pub const EXIT_IO: u8 = 5;

/// Upper bound on parallel runs in `compare`.
pub const THREADS_ENV: &str = "EAGC_SIM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "eagc-sim", version, about = "Multi-area frequency control simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Overrides {
    /// Seed offset for filtered-noise disturbances.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Integration step (s).
    #[arg(long)]
    pub dt: Option<f64>,
    /// Simulated duration (s).
    #[arg(long)]
    pub horizon: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one controller and write trajectory, metrics and run metadata.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_parser = parse_controller)]
        controller: ControllerKind,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run all three controllers and write a side-by-side metrics table.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print the area and system LQR gains.
    Gains {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Summarise the control-region margins recorded in a run directory.
    CheckStability {
        #[arg(long)]
        run: PathBuf,
    },
    /// Parse and validate a scenario file.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

fn parse_controller(s: &str) -> Result<ControllerKind, String> {
    s.parse()
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Output(#[from] OutputError),
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Scenario(ScenarioError::Io { .. }) => EXIT_IO,
            CliError::Scenario(_) | CliError::Invalid(_) => EXIT_VALIDATION,
            CliError::Sim(e) if e.is_divergence() => EXIT_DIVERGENCE,
            CliError::Sim(_) => EXIT_VALIDATION,
            CliError::Output(OutputError::EmptyHorizon { .. }) => EXIT_VALIDATION,
            CliError::Output(_) => EXIT_IO,
        }
    }
}

/// Apply command-line overrides on top of the file values.
pub fn apply_overrides(doc: &mut ScenarioDocument, o: &Overrides) {
    if let Some(seed) = o.seed {
        doc.solver.seed = seed;
    }
    if let Some(dt) = o.dt {
        doc.solver.dt = dt;
    }
    if let Some(h) = o.horizon {
        doc.solver.horizon = h;
    }
}

fn load(path: &Path, overrides: Option<&Overrides>) -> Result<ScenarioDocument, CliError> {
    let mut doc = parse_scenario(path)?;
    if let Some(o) = overrides {
        apply_overrides(&mut doc, o);
        doc.build()?;
    }
    Ok(doc)
}

/// Diagonal control-cost weights per generator from the area LQR weights.
pub fn cost_weights(doc: &ScenarioDocument) -> Result<Vec<f64>, CliError> {
    let scenario = doc.build()?;
    let mut w = vec![1.0; scenario.topology.generators().len()];
    for (area, weights) in scenario.topology.areas().iter().zip(&scenario.eagc.area_weights) {
        for (j, &g) in area.generators.iter().enumerate() {
            w[g] = weights.r[(j, j)];
        }
    }
    Ok(w)
}

/// Simulate one controller and compute its metrics. Metrics are `None`
/// when the horizon is too short for them.
pub fn simulate(
    doc: &ScenarioDocument,
    controller: ControllerKind,
) -> Result<(Trajectory, Option<MetricsReport>), CliError> {
    let scenario = doc.build()?;
    let traj = run_scenario(&scenario, controller)?;
    let metrics = match compute_metrics(&traj, &cost_weights(doc)?) {
        Ok(m) => Some(m),
        Err(e) => {
            warn!("metrics skipped: {e}");
            None
        }
    };
    Ok((traj, metrics))
}

fn run_meta(doc: &ScenarioDocument, controller: ControllerKind) -> RunMeta {
    RunMeta::new(
        &doc.to_canonical_string(),
        &doc.metadata.name,
        controller.name(),
        doc.solver.seed,
        doc.solver_config(),
    )
}

fn cmd_simulate(path: &Path, controller: ControllerKind, out: &Path, o: &Overrides) -> Result<(), CliError> {
    let doc = load(path, Some(o))?;
    let (traj, metrics) = simulate(&doc, controller)?;
    let files = write_outputs(&traj, metrics.as_ref(), &run_meta(&doc, controller), out)?;
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn thread_cap() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(available)
}

type ControllerRun = Result<(Trajectory, Option<MetricsReport>), CliError>;

/// Run every controller, at most `threads` at a time.
pub fn run_all(doc: &ScenarioDocument, threads: usize) -> Vec<(ControllerKind, ControllerRun)> {
    let kinds = ControllerKind::ALL;
    let mut results = Vec::with_capacity(kinds.len());
    for chunk in kinds.chunks(threads.max(1)) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|&k| (k, s.spawn(move || simulate(doc, k)))).collect();
            for (k, h) in handles {
                results.push((k, h.join().expect("simulation thread panicked")));
            }
        });
    }
    results
}

pub const COMPARISON_FILE: &str = "comparison.csv";

pub fn comparison_rows(reports: &[MetricsReport]) -> Vec<(String, String, f64)> {
    let mut rows = Vec::new();
    type Metric = fn(&MetricsReport) -> f64;
    let metric_fns: [(&str, Metric); 7] = [
        ("mean_abs_steady_state_error", |r| r.system.mean_abs_steady_state_error),
        ("max_final_abs_error", |r| r.system.max_final_abs_error),
        ("max_settling_time", |r| r.system.max_settling_time),
        ("max_oscillation_amplitude", |r| r.system.max_oscillation_amplitude),
        ("band_energy", |r| r.system.band_energy),
        ("control_cost", |r| r.system.control_cost),
        ("inter_area_intv_rms", |r| r.system.inter_area_intv_rms),
    ];
    for (name, f) in metric_fns {
        for r in reports {
            rows.push((name.to_string(), r.controller.name().to_string(), f(r)));
        }
    }
    rows
}

fn cmd_compare(path: &Path, out: &Path, o: &Overrides) -> Result<(), CliError> {
    let doc = load(path, Some(o))?;
    let mut reports = Vec::new();
    for (kind, result) in run_all(&doc, thread_cap()) {
        let (traj, metrics) = result?;
        write_outputs(&traj, metrics.as_ref(), &run_meta(&doc, kind), &out.join(kind.name()))?;
        reports.push(
            metrics.ok_or_else(|| CliError::Invalid(format!("horizon too short for metrics of the {kind} run")))?,
        );
    }
    let rows = comparison_rows(&reports);
    let mut csv = String::from("metric,controller,value\n");
    println!("{:<30} {:<14} {:>16}", "metric", "controller", "value");
    for (m, c, v) in &rows {
        csv.push_str(&format!("{m},{c},{}\n", output::format_sig9(*v)));
        println!("{m:<30} {c:<14} {v:>16.6e}");
    }
    let dest = out.join(COMPARISON_FILE);
    std::fs::write(&dest, csv).map_err(|source| OutputError::Io {
        path: dest.clone(),
        source,
    })?;
    println!("wrote {}", dest.display());
    Ok(())
}

fn cmd_gains(path: &Path) -> Result<(), CliError> {
    let doc = load(path, None)?;
    let scenario = doc.build()?;
    let (areas, system) = scenario.gains()?;
    let topo = &scenario.topology;
    for (area, g) in topo.areas().iter().zip(&areas) {
        println!(
            "area {}: P = {:.9e}, decay = {:.6e} 1/s, CARE residual = {:.3e}",
            area.id,
            g.p,
            g.decay_rate(),
            g.residual
        );
        for (&gen, k) in area.generators.iter().zip(&g.k) {
            println!("  K[{}] = {k:.9e}", topo.generators()[gen].id);
        }
    }
    println!(
        "system: P = {:.9e}, decay = {:.6e} 1/s, CARE residual = {:.3e}",
        system.p,
        system.decay_rate(),
        system.residual
    );
    for (area, k) in topo.areas().iter().zip(&system.k) {
        println!("  K[{}] = {k:.9e}", area.id);
    }
    Ok(())
}

fn cmd_check_stability(run: &Path) -> Result<(), CliError> {
    let table = read_csv(&run.join(output::TRAJECTORY_FILE))?;
    let time = table
        .column("time")
        .ok_or_else(|| CliError::Invalid("trajectory.csv has no time column".into()))?;
    let mut any = false;
    println!(
        "{:<12} {:>14} {:>10} {:>14}",
        "generator", "min margin", "violations", "first (s)"
    );
    for (name, col) in table.names.iter().zip(&table.columns) {
        let Some(id) = name.strip_prefix("lemma1_margin.") else {
            continue;
        };
        any = true;
        let min = col.iter().copied().fold(f64::INFINITY, f64::min);
        let bad = col.iter().filter(|m| **m < 0.0).count();
        let first = col.iter().position(|m| *m < 0.0).map(|i| time[i]);
        println!(
            "{id:<12} {min:>14.6e} {bad:>10} {:>14}",
            first.map_or("-".to_string(), |t| format!("{t:.3}"))
        );
    }
    if !any {
        return Err(CliError::Invalid("trajectory.csv has no lemma1_margin columns".into()));
    }
    Ok(())
}

fn cmd_validate(path: &Path) -> Result<(), CliError> {
    let doc = load(path, None)?;
    let s = doc.build()?;
    let topo = &s.topology;
    println!(
        "{}: ok ({} buses, {} generators, {} areas, {} disturbances)",
        doc.metadata.name,
        topo.buses().len(),
        topo.generators().len(),
        topo.areas().len(),
        s.disturbances.len()
    );
    Ok(())
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate {
            scenario,
            controller,
            out,
            overrides,
        } => cmd_simulate(&scenario, controller, &out, &overrides),
        Command::Compare {
            scenario,
            out,
            overrides,
        } => cmd_compare(&scenario, &out, &overrides),
        Command::Gains { scenario } => cmd_gains(&scenario),
        Command::CheckStability { run } => cmd_check_stability(&run),
        Command::Validate { scenario } => cmd_validate(&scenario),
    }
}

/// Parse `args` and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => {
            info!("done");
            ExitCode::from(EXIT_OK)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
