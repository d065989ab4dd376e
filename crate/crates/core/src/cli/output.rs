//! Run artifacts: `trajectory.csv`, `metrics.csv` and `run.meta`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::sim::{MetricsReport, SolverConfig, Trajectory};

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const META_FILE: &str = "run.meta";

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("nothing to write: horizon {horizon} s is shorter than record_dt {record_dt} s")]
    EmptyHorizon { horizon: f64, record_dt: f64 },
    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> OutputError + '_ {
    move |source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Shortest `%.9g`-style rendering: nine significant digits, trailing
/// zeros dropped, scientific notation outside `[1e-4, 1e9)`.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let negative = mantissa.starts_with('-');
    let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();
    let sign = if negative { "-" } else { "" };
    if !(-4..9).contains(&exp) {
        let m = mantissa.trim_end_matches('0').trim_end_matches('.');
        return format!("{m}e{exp}");
    }
    let s = if exp >= 0 {
        let split = exp as usize + 1;
        let (int, frac) = digits.split_at(split);
        format!("{int}.{frac}")
    } else {
        format!("0.{}{}", "0".repeat((-exp - 1) as usize), digits)
    };
    let s = s.trim_end_matches('0').trim_end_matches('.');
    format!("{sign}{s}")
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMeta {
    pub scenario_hash: String,
    pub scenario_name: String,
    pub controller: String,
    pub seed: u64,
    pub solver: SolverConfig,
    pub tool_version: String,
}

impl RunMeta {
    pub fn new(canonical_scenario: &str, name: &str, controller: &str, seed: u64, solver: SolverConfig) -> Self {
        Self {
            scenario_hash: scenario_hash(canonical_scenario),
            scenario_name: name.to_string(),
            controller: controller.to_string(),
            seed,
            solver,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn render(&self) -> String {
        let s = &self.solver;
        format!(
            "scenario_hash = \"sha256:{}\"\nscenario = \"{}\"\ncontroller = \"{}\"\nseed = {}\n\
             dt = {:e}\nhorizon = {:e}\ncontrol_dt = {:e}\nrecord_dt = {:e}\ntool_version = \"{}\"\n",
            self.scenario_hash,
            self.scenario_name,
            self.controller,
            self.seed,
            s.dt,
            s.horizon,
            s.control_dt,
            s.record_dt,
            self.tool_version
        )
    }
}

pub fn scenario_hash(canonical_scenario: &str) -> String {
    Sha256::digest(canonical_scenario.as_bytes())
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

pub fn trajectory_csv(traj: &Trajectory) -> String {
    let mut out = String::with_capacity(traj.len() * (traj.names.len() + 1) * 14);
    out.push_str("time");
    for n in &traj.names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (i, t) in traj.time.iter().enumerate() {
        out.push_str(&format_sig9(*t));
        for c in &traj.columns {
            out.push(',');
            out.push_str(&format_sig9(c[i]));
        }
        out.push('\n');
    }
    out
}

pub const METRICS_HEADER: &str = "scope,id,steady_state_error,final_max_abs_error,settling_time,\
oscillation_amplitude,dominant_frequency,band_energy,control_cost,area_layer_share,inter_area_intv_rms";

pub fn metrics_csv(report: &MetricsReport) -> String {
    let f = format_sig9;
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for g in &report.generators {
        let _ = writeln!(
            out,
            "generator,{},{},{},{},{},{},{},{},{},",
            g.id,
            f(g.steady_state_error),
            f(g.final_max_abs_error),
            f(g.settling_time),
            f(g.oscillation_amplitude),
            f(g.dominant_frequency),
            f(g.band_energy),
            f(g.control_cost),
            f(g.area_layer_share),
        );
    }
    let s = &report.system;
    let _ = writeln!(
        out,
        "system,all,{},{},{},{},,{},{},,{}",
        f(s.mean_abs_steady_state_error),
        f(s.max_final_abs_error),
        f(s.max_settling_time),
        f(s.max_oscillation_amplitude),
        f(s.band_energy),
        f(s.control_cost),
        f(s.inter_area_intv_rms),
    );
    out
}

/// Write all artifacts of one run into `out_dir`. Files are staged under
/// temporary names and only renamed into place once all are written.
pub fn write_outputs(
    traj: &Trajectory,
    metrics: Option<&MetricsReport>,
    meta: &RunMeta,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, OutputError> {
    let s = &meta.solver;
    if s.horizon < s.record_dt || traj.is_empty() {
        return Err(OutputError::EmptyHorizon {
            horizon: s.horizon,
            record_dt: s.record_dt,
        });
    }
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut files = vec![(TRAJECTORY_FILE, trajectory_csv(traj))];
    if let Some(m) = metrics {
        files.push((METRICS_FILE, metrics_csv(m)));
    }
    files.push((META_FILE, meta.render()));

    let mut staged = Vec::new();
    for (name, body) in &files {
        let tmp = out_dir.join(format!(".{name}.partial"));
        if let Err(e) = fs::write(&tmp, body) {
            for p in staged.iter().chain(std::iter::once(&tmp)) {
                let _ = fs::remove_file(p);
            }
            return Err(io(&tmp)(e));
        }
        staged.push(tmp);
    }
    let mut written = Vec::new();
    for ((name, _), tmp) in files.iter().zip(&staged) {
        let dest = out_dir.join(name);
        fs::rename(tmp, &dest).map_err(io(&dest))?;
        written.push(dest);
    }
    Ok(written)
}

/// Header and numeric columns of a `trajectory.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl CsvTable {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
    }
}

pub fn read_csv(path: &Path) -> Result<CsvTable, OutputError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let fmt = |line: usize, message: String| OutputError::Format {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines();
    let names: Vec<String> = lines
        .next()
        .ok_or_else(|| fmt(1, "empty file".into()))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut columns = vec![Vec::new(); names.len()];
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != names.len() {
            return Err(fmt(
                i + 2,
                format!("expected {} fields, got {}", names.len(), fields.len()),
            ));
        }
        for (c, f) in columns.iter_mut().zip(fields) {
            c.push(f.parse::<f64>().map_err(|e| fmt(i + 2, format!("'{f}': {e}")))?);
        }
    }
    Ok(CsvTable { names, columns })
}
