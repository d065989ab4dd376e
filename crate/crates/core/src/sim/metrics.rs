//! Scalar summaries of a trajectory: frequency error, settling, band-limited
//! oscillation content, control cost and inter-area imbalance.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use super::runner::{ControllerKind, Trajectory};

/// Minimum post-disturbance coverage (s).
pub const MIN_WINDOW: f64 = 10.0;
/// Half-width of the settling band (pu).
pub const SETTLING_BAND: f64 = 2e-3;
/// Oscillation band (Hz).
pub const BAND: (f64, f64) = (0.1, 5.0);
/// Fraction of the horizon treated as steady state.
pub const STEADY_FRACTION: f64 = 0.2;
const ZERO_PAD: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("trajectory covers {available:.3} s after the last disturbance; need {needed} s")]
    HorizonTooShort { available: f64, needed: f64 },
    #[error("trajectory has no series '{0}'")]
    MissingSeries(String),
    #[error("need {expected} control-cost weights, got {got}")]
    Weights { expected: usize, got: usize },
}

/// Linear least-squares trend removed from `x` sampled at unit spacing.
pub fn detrend(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return vec![0.0; n];
    }
    // offsets are taken from the first sample so a constant stays exact
    let x: Vec<f64> = x.iter().map(|v| v - x[0]).collect();
    let nf = n as f64;
    let t_mean = (nf - 1.0) / 2.0;
    let x_mean = x.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, v) in x.iter().enumerate() {
        let dt = i as f64 - t_mean;
        sxy += dt * (v - x_mean);
        sxx += dt * dt;
    }
    let slope = sxy / sxx;
    x.iter()
        .enumerate()
        .map(|(i, v)| v - x_mean - slope * (i as f64 - t_mean))
        .collect()
}

fn fft(buf: &mut [Complex<f64>]) {
    FftPlanner::new().plan_fft_forward(buf.len()).process(buf);
}

/// `∫ x_band(t)² dt` of the part of `x` (sampled at `dt`) whose spectrum
/// lies in `[f_lo, f_hi]`, by Parseval on the detrended signal.
pub fn band_energy(x: &[f64], dt: f64, f_lo: f64, f_hi: f64) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let mut buf: Vec<Complex<f64>> = detrend(x).into_iter().map(|v| Complex::new(v, 0.0)).collect();
    fft(&mut buf);
    let df = 1.0 / (n as f64 * dt);
    let mut e = 0.0;
    for (k, c) in buf.iter().enumerate().take(n / 2 + 1) {
        let f = k as f64 * df;
        if f < f_lo || f > f_hi {
            continue;
        }
        let mirrored = k != 0 && !(n.is_multiple_of(2) && k == n / 2);
        e += c.norm_sqr() * if mirrored { 2.0 } else { 1.0 };
    }
    e * dt / n as f64
}

/// Strongest sinusoidal component of `x` inside `[f_lo, f_hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralPeak {
    pub frequency: f64,
    pub amplitude: f64,
    /// Bin spacing of the unpadded window (Hz).
    pub resolution: f64,
}

/// Hann-windowed, zero-padded peak search over the detrended signal.
/// Amplitudes are corrected for the window's coherent gain.
pub fn spectral_peak(x: &[f64], dt: f64, f_lo: f64, f_hi: f64) -> SpectralPeak {
    let n = x.len();
    let resolution = if n > 0 { 1.0 / (n as f64 * dt) } else { f64::INFINITY };
    let none = SpectralPeak {
        frequency: 0.0,
        amplitude: 0.0,
        resolution,
    };
    if n < 2 {
        return none;
    }
    let y = detrend(x);
    let w: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect();
    let gain: f64 = w.iter().sum();
    let m = n * ZERO_PAD;
    let mut buf = vec![Complex::new(0.0, 0.0); m];
    for i in 0..n {
        buf[i].re = y[i] * w[i];
    }
    fft(&mut buf);
    let df = 1.0 / (m as f64 * dt);
    let mut best = none;
    for (k, c) in buf.iter().enumerate().take(m / 2 + 1).skip(1) {
        let f = k as f64 * df;
        if f < f_lo || f > f_hi {
            continue;
        }
        let a = 2.0 * c.norm() / gain;
        if a > best.amplitude {
            best.amplitude = a;
            best.frequency = f;
        }
    }
    best
}

/// Time since `t0` of the last sample outside `±band`; zero if none.
pub fn settling_time(time: &[f64], err: &[f64], t0: f64, band: f64) -> f64 {
    time.iter()
        .zip(err)
        .filter(|(t, e)| **t >= t0 && e.abs() > band)
        .map(|(t, _)| t - t0)
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMetrics {
    pub id: String,
    /// Mean of `ω − ω_ref` over the final 20 % of the horizon (signed).
    pub steady_state_error: f64,
    /// Largest `|ω − ω_ref|` over the final 20 %.
    pub final_max_abs_error: f64,
    pub settling_time: f64,
    pub oscillation_amplitude: f64,
    pub dominant_frequency: f64,
    pub band_energy: f64,
    /// `R_i ∫ u_i² dt` of the applied input.
    pub control_cost: f64,
    /// `∫ u_r,i² dt` over the generator's area total.
    pub area_layer_share: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemMetrics {
    pub mean_abs_steady_state_error: f64,
    pub max_final_abs_error: f64,
    pub max_settling_time: f64,
    pub max_oscillation_amplitude: f64,
    pub band_energy: f64,
    pub control_cost: f64,
    /// RMS of the area-level IntV rates over the analysis window.
    pub inter_area_intv_rms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub controller: ControllerKind,
    pub window_start: f64,
    pub window_end: f64,
    pub generators: Vec<GeneratorMetrics>,
    pub system: SystemMetrics,
}

fn series<'a>(traj: &'a Trajectory, name: &str) -> Result<&'a [f64], MetricsError> {
    traj.series(name)
        .ok_or_else(|| MetricsError::MissingSeries(name.to_string()))
}

/// Left-rectangle `∫ x² dt`; exact for zero-order-hold signals recorded at
/// their update instants.
fn square_integral(x: &[f64], dt: f64) -> f64 {
    x.iter().take(x.len().saturating_sub(1)).map(|v| v * v * dt).sum()
}

/// `weights` are the diagonal control-cost weights, one per generator.
pub fn compute_metrics(traj: &Trajectory, weights: &[f64]) -> Result<MetricsReport, MetricsError> {
    let n_gen = traj.generator_ids.len();
    if weights.len() != n_gen {
        return Err(MetricsError::Weights {
            expected: n_gen,
            got: weights.len(),
        });
    }
    let t_end = traj.time.last().copied().unwrap_or(0.0);
    let t0 = traj.analysis_start;
    if t_end - t0 < MIN_WINDOW - 1e-9 {
        return Err(MetricsError::HorizonTooShort {
            available: t_end - t0,
            needed: MIN_WINDOW,
        });
    }
    let dt = traj.record_dt;
    let t_ss = t_end - STEADY_FRACTION * (t_end - traj.time[0]);
    let window: Vec<usize> = (0..traj.len()).filter(|&i| traj.time[i] >= t0).collect();
    let steady: Vec<usize> = (0..traj.len()).filter(|&i| traj.time[i] >= t_ss).collect();

    let mut area_energy = vec![0.0; n_gen];
    let mut gens = Vec::with_capacity(n_gen);
    for (g, id) in traj.generator_ids.iter().enumerate() {
        let omega = series(traj, &format!("gen.{id}.omega"))?;
        let err: Vec<f64> = omega.iter().map(|w| w - traj.omega_ref[g]).collect();
        let w_err: Vec<f64> = window.iter().map(|&i| err[i]).collect();
        let s_err: Vec<f64> = steady.iter().map(|&i| err[i]).collect();
        let peak = spectral_peak(&w_err, dt, BAND.0, BAND.1);
        let u = series(traj, &format!("u.{id}.total"))?;
        area_energy[g] = square_integral(series(traj, &format!("u.{id}.r"))?, dt);
        gens.push(GeneratorMetrics {
            id: id.clone(),
            steady_state_error: s_err.iter().sum::<f64>() / s_err.len().max(1) as f64,
            final_max_abs_error: s_err.iter().fold(0.0, |m, e| m.max(e.abs())),
            settling_time: settling_time(&traj.time, &err, t0, SETTLING_BAND),
            oscillation_amplitude: peak.amplitude,
            dominant_frequency: peak.frequency,
            band_energy: band_energy(&w_err, dt, BAND.0, BAND.1),
            control_cost: weights[g] * square_integral(u, dt),
            area_layer_share: 0.0,
        });
    }
    for g in 0..n_gen {
        let area = traj.generator_area[g];
        let total: f64 = (0..n_gen)
            .filter(|&j| traj.generator_area[j] == area)
            .map(|j| area_energy[j])
            .sum();
        gens[g].area_layer_share = if total > 0.0 { area_energy[g] / total } else { 0.0 };
    }

    let mut sq = 0.0;
    let mut count = 0usize;
    for id in &traj.area_ids {
        let rate = series(traj, &format!("z_r_dot.{id}"))?;
        for &i in &window {
            sq += rate[i] * rate[i];
            count += 1;
        }
    }
    let fold_max = |f: fn(&GeneratorMetrics) -> f64| gens.iter().map(f).fold(0.0, f64::max);
    let system = SystemMetrics {
        mean_abs_steady_state_error: gens.iter().map(|g| g.steady_state_error.abs()).sum::<f64>() / n_gen.max(1) as f64,
        max_final_abs_error: fold_max(|g| g.final_max_abs_error),
        max_settling_time: fold_max(|g| g.settling_time),
        max_oscillation_amplitude: fold_max(|g| g.oscillation_amplitude),
        band_energy: gens.iter().map(|g| g.band_energy).sum(),
        control_cost: gens.iter().map(|g| g.control_cost).sum(),
        inter_area_intv_rms: if count > 0 { (sq / count as f64).sqrt() } else { 0.0 },
    };
    Ok(MetricsReport {
        controller: traj.controller,
        window_start: t0,
        window_end: t_end,
        generators: gens,
        system,
    })
}
