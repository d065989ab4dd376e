//! Frequency controllers: the three E-AGC layers, the ACE-based
//! conventional AGC baseline, saturation, and the generator stability
//! certificate.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::models::GeneratorParams;
use crate::network::Area;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("LQR weight {which} is not positive definite")]
    NotPositiveDefinite { which: &'static str },
    #[error("LQR weight R must be square and symmetric ({rows}x{cols})")]
    BadShape { rows: usize, cols: usize },
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid conventional AGC parameter: {0}")]
    Agc(String),
}

/// `u_c = (r / K_t)(P_e − P_m_ref)`: cancels the component's own imbalance.
pub fn component_control(p_e: f64, p_m_ref: f64, params: &GeneratorParams) -> f64 {
    params.r / params.k_t * (p_e - p_m_ref)
}

/// Quadratic weights for one coordination layer: scalar state weight Q,
/// input weight R over the participants.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrWeights {
    pub q: f64,
    pub r: DMatrix<f64>,
}

impl LqrWeights {
    pub fn diagonal(q: f64, r: &[f64]) -> Self {
        Self {
            q,
            r: DMatrix::from_diagonal(&DVector::from_column_slice(r)),
        }
    }

    pub fn participants(&self) -> usize {
        self.r.nrows()
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        if !(self.q.is_finite() && self.q > 0.0) {
            return Err(ControlError::NotPositiveDefinite { which: "Q" });
        }
        let (rows, cols) = self.r.shape();
        if rows == 0 || rows != cols {
            return Err(ControlError::BadShape { rows, cols });
        }
        if (&self.r - self.r.transpose()).abs().max() > 1e-12 * self.r.abs().max() {
            return Err(ControlError::BadShape { rows, cols });
        }
        if self.r.iter().any(|x| !x.is_finite()) || self.r.clone().cholesky().is_none() {
            return Err(ControlError::NotPositiveDefinite { which: "R" });
        }
        // Cholesky accepts tiny pivots; demand a strictly positive spectrum
        let min_eig = SymmetricEigen::new(self.r.clone()).eigenvalues.min();
        if min_eig <= 0.0 {
            return Err(ControlError::NotPositiveDefinite { which: "R" });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqrGain {
    /// One gain per participant; the law is `u = −K z`.
    pub k: Vec<f64>,
    /// Scalar Riccati solution.
    pub p: f64,
    /// `|Q − P (B R⁻¹ Bᵀ) P|`.
    pub residual: f64,
}

impl LqrGain {
    /// Closed-loop decay rate `B K` of `ż = −B K z`.
    pub fn decay_rate(&self) -> f64 {
        self.k.iter().sum()
    }
}

/// LQR for the pure integrator `ż = B u`, `B = 1^{1×n}`, with the CARE
/// `0 = Q − P B R⁻¹ Bᵀ P` solved in closed form.
pub fn lqr_integrator_gain(weights: &LqrWeights, n_participants: usize) -> Result<LqrGain, ControlError> {
    weights.validate()?;
    if n_participants == 0 || weights.participants() != n_participants {
        return Err(ControlError::Dimension {
            what: "LQR participants",
            expected: n_participants,
            got: weights.participants(),
        });
    }
    let chol = weights
        .r
        .clone()
        .cholesky()
        .ok_or(ControlError::NotPositiveDefinite { which: "R" })?;
    let r_inv_b = chol.solve(&DVector::from_element(n_participants, 1.0));
    let s: f64 = r_inv_b.sum();
    let p = (weights.q / s).sqrt();
    let k: Vec<f64> = r_inv_b.iter().map(|x| x * p).collect();
    let residual = (weights.q - p * s * p).abs();
    Ok(LqrGain { k, p, residual })
}

/// `u_r = −K z_r`, each entry clipped to `±headroom[i]` when given.
pub fn area_control(z_r: f64, gain: &LqrGain, headroom: Option<&[f64]>) -> Result<Vec<f64>, ControlError> {
    if let Some(h) = headroom {
        if h.len() != gain.k.len() {
            return Err(ControlError::Dimension {
                what: "saturation headroom",
                expected: gain.k.len(),
                got: h.len(),
            });
        }
    }
    Ok(gain
        .k
        .iter()
        .enumerate()
        .map(|(i, k)| {
            let u = -k * z_r;
            match headroom {
                Some(h) => u.clamp(-h[i], h[i]),
                None => u,
            }
        })
        .collect())
}

/// `u_s = −K z_s`, one entry per area.
pub fn system_control(z_s: f64, gain: &LqrGain) -> Vec<f64> {
    gain.k.iter().map(|k| -k * z_s).collect()
}

/// Split an area's scalar share across its generators.
pub fn distribute_share(share: f64, participation: &[f64]) -> Vec<f64> {
    participation.iter().map(|w| share * w).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Composite {
    pub value: f64,
    /// Set only when the raw sum strictly exceeds `u_max` in magnitude.
    pub saturated: bool,
}

/// `clamp(u_c + u_r + u_s, −u_max, u_max)`. A raw sum within a few ulps of
/// the limit counts as on the limit, not beyond it.
pub fn compose_control(u_c: f64, u_r: f64, u_s: f64, u_max: f64) -> Composite {
    let raw = u_c + u_r + u_s;
    Composite {
        value: raw.clamp(-u_max, u_max),
        saturated: raw.abs() > u_max * (1.0 + 4.0 * f64::EPSILON),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConventionalAgcParams {
    /// Frequency bias per area.
    pub bias: Vec<f64>,
    /// Integral gain (1/s).
    pub k_i: f64,
    /// Per-generator participation; sums to one inside each area.
    pub participation: Vec<f64>,
    /// Scheduled net interchange per area (export positive).
    pub tie_schedule: Vec<f64>,
}

impl ConventionalAgcParams {
    pub fn validate(&self, areas: &[Area], n_generators: usize) -> Result<(), ControlError> {
        let bad = |m: String| Err(ControlError::Agc(m));
        if !(self.k_i.is_finite() && self.k_i > 0.0) {
            return bad(format!("k_i = {} must be > 0", self.k_i));
        }
        if self.bias.len() != areas.len() || self.tie_schedule.len() != areas.len() {
            return bad(format!(
                "need one bias and one schedule entry per area ({})",
                areas.len()
            ));
        }
        if self.participation.len() != n_generators {
            return bad(format!("need one participation factor per generator ({n_generators})"));
        }
        if self.participation.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return bad("participation factors must be >= 0".into());
        }
        for a in areas {
            let s: f64 = a.generators.iter().map(|&g| self.participation[g]).sum();
            if (s - 1.0).abs() > 1e-9 {
                return bad(format!("participation in area '{}' sums to {s}, not 1", a.id));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaMeasurement {
    /// Area frequency deviation from the setpoint (pu).
    pub delta_omega: f64,
    /// Measured net tie-line export (pu).
    pub tie_flow: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgcStep {
    pub u: Vec<f64>,
    pub integral: Vec<f64>,
    pub ace: Vec<f64>,
}

/// One sampled update of the integral-of-ACE controller:
/// `ACE = ΔP_tie + B Δω`, `∫ ← ∫ + ACE·dt`, `u_i = −K_I ∫ · pf_i`.
pub fn conventional_agc_step(
    measurements: &[AreaMeasurement],
    params: &ConventionalAgcParams,
    areas: &[Area],
    integral: &[f64],
    dt: f64,
) -> Result<AgcStep, ControlError> {
    if measurements.len() != areas.len() || integral.len() != areas.len() {
        return Err(ControlError::Dimension {
            what: "area measurements",
            expected: areas.len(),
            got: measurements.len().min(integral.len()),
        });
    }
    if dt.is_nan() || dt <= 0.0 {
        return Err(ControlError::Agc(format!("dt = {dt} must be > 0")));
    }
    let mut u = vec![0.0; params.participation.len()];
    let mut next = integral.to_vec();
    let mut ace = vec![0.0; areas.len()];
    for (a, area) in areas.iter().enumerate() {
        let m = measurements[a];
        ace[a] = (m.tie_flow - params.tie_schedule[a]) + params.bias[a] * m.delta_omega;
        next[a] += ace[a] * dt;
        for &g in &area.generators {
            u[g] = -params.k_i * next[a] * params.participation[g];
        }
    }
    Ok(AgcStep { u, integral: next, ace })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lemma1Check {
    pub holds: bool,
    /// `(K_t / r) u_max − |P_e − P_m_ref|`.
    pub margin: f64,
}

/// Sufficient condition for the component-controlled generator to stay
/// stable under saturation: `|P_e − P_m_ref| ≤ (K_t / r) u_max`.
pub fn lemma1_condition(p_e: f64, p_m_ref: f64, params: &GeneratorParams) -> Lemma1Check {
    let bound = params.gain() * params.u_max;
    let margin = bound - (p_e - p_m_ref).abs();
    Lemma1Check {
        holds: margin >= 0.0,
        margin,
    }
}

/// Rank-one quadratic form `V(x) = xᵀ P x`, `P = (T₂ T₁)ᵀ (T₂ T₁)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovCertificate {
    pub t1: [f64; 4],
    pub t2: [f64; 4],
    pub p: [[f64; 4]; 4],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertificateCheck {
    pub symmetric: bool,
    pub min_eigenvalue: f64,
    /// Singular values, descending.
    pub singular_values: [f64; 4],
}

impl CertificateCheck {
    pub fn is_psd_rank_one(&self) -> bool {
        let top = self.singular_values[0];
        self.symmetric && self.min_eigenvalue >= -1e-12 * top.max(1.0) && self.singular_values[1] < 1e-12 * top.max(1.0)
    }
}

impl LyapunovCertificate {
    pub fn value(&self, x: &[f64; 4]) -> f64 {
        let mut v = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                v += x[i] * self.p[i][j] * x[j];
            }
        }
        v
    }

    pub fn check(&self) -> CertificateCheck {
        let m = DMatrix::from_fn(4, 4, |i, j| self.p[i][j]);
        let symmetric = (0..4).all(|i| (0..4).all(|j| self.p[i][j] == self.p[j][i]));
        let min_eigenvalue = SymmetricEigen::new(m.clone()).eigenvalues.min();
        let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        CertificateCheck {
            symmetric,
            min_eigenvalue,
            singular_values: [sv[0], sv[1], sv[2], sv[3]],
        }
    }
}

/// `T₁ = [(D + K_t/r)/M, M, T_u, T_g K_t/r]`, `T₂ = [0, M, T_u, T_g K_t/r]ᵀ`.
pub fn lyapunov_matrix(params: &GeneratorParams) -> LyapunovCertificate {
    let p = params;
    let g = p.gain();
    let t1 = [(p.d + g) / p.m, p.m, p.t_u, p.t_g * g];
    let t2 = [0.0, p.m, p.t_u, p.t_g * g];
    // (T₂ T₁)_{ij} = t2_i t1_j
    let mut outer = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            outer[i][j] = t2[i] * t1[j];
        }
    }
    let mut pm = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            pm[i][j] = (0..4).map(|k| outer[k][i] * outer[k][j]).sum();
        }
    }
    LyapunovCertificate { t1, t2, p: pm }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intv::component_intv_rate;
    use crate::network::fixtures;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn area(id: &str, g: Vec<usize>) -> Area {
        Area {
            id: id.into(),
            generators: g,
        }
    }

    #[test]
    fn component_control_examples() {
        let p = fixtures::gen_params(0.2);
        assert_eq!(component_control(0.2, 0.2, &p), 0.0);
        assert_abs_diff_eq!(component_control(0.6, 0.2, &p), 0.02, epsilon = 1e-15);
        let u = component_control(0.6, 0.2, &p);
        assert_abs_diff_eq!(component_intv_rate(0.2, 0.6, u, &p), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn lqr_examples() {
        let g = lqr_integrator_gain(&LqrWeights::diagonal(1.0, &[1.0]), 1).unwrap();
        assert_abs_diff_eq!(g.p, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g.k[0], 1.0, epsilon = 1e-15);

        let g = lqr_integrator_gain(&LqrWeights::diagonal(1.0, &[1.0, 1.0]), 2).unwrap();
        assert_abs_diff_eq!(g.p, FRAC_1_SQRT_2, epsilon = 1e-12);
        assert_abs_diff_eq!(g.k[0], FRAC_1_SQRT_2, epsilon = 1e-12);
        assert_abs_diff_eq!(g.k[1], FRAC_1_SQRT_2, epsilon = 1e-12);
        assert!((g.p * g.p * 2.0 - 1.0).abs() < 1e-10);

        let g = lqr_integrator_gain(&LqrWeights::diagonal(4.0, &[1.0, 4.0]), 2).unwrap();
        assert_abs_diff_eq!(g.p, 1.7888544, epsilon = 1e-7);
        assert_abs_diff_eq!(g.k[0], 1.7888544, epsilon = 1e-7);
        assert_abs_diff_eq!(g.k[1], 0.4472136, epsilon = 1e-7);
        assert_abs_diff_eq!(g.decay_rate(), 2.2360680, epsilon = 1e-7);
        assert!(g.residual < 1e-10);
    }

    #[test]
    fn lqr_rejects_bad_weights() {
        let e = lqr_integrator_gain(&LqrWeights::diagonal(1.0, &[1.0, 0.0]), 2).unwrap_err();
        assert_eq!(e, ControlError::NotPositiveDefinite { which: "R" });
        let e = lqr_integrator_gain(&LqrWeights::diagonal(0.0, &[1.0]), 1).unwrap_err();
        assert_eq!(e, ControlError::NotPositiveDefinite { which: "Q" });
        let e = lqr_integrator_gain(&LqrWeights::diagonal(1.0, &[1.0, -2.0]), 2).unwrap_err();
        assert_eq!(e, ControlError::NotPositiveDefinite { which: "R" });
        assert!(lqr_integrator_gain(&LqrWeights::diagonal(1.0, &[1.0]), 2).is_err());
    }

    #[test]
    fn lqr_accepts_full_spd_r() {
        let w = LqrWeights {
            q: 2.0,
            r: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
        };
        let g = lqr_integrator_gain(&w, 2).unwrap();
        assert!(g.residual < 1e-12);
    }

    /// Cost of `u = −K z` on `ż = Σu`: `z0² (Q + Kᵀ R K) / (2 Σ K)`.
    fn closed_loop_cost(q: f64, r: &[f64], k: &[f64]) -> f64 {
        let rate: f64 = k.iter().sum();
        let quad: f64 = k.iter().zip(r).map(|(k, r)| r * k * k).sum();
        (q + quad) / (2.0 * rate)
    }

    proptest! {
        #[test]
        fn lqr_gain_is_cost_optimal(
            q in 0.1..10.0f64,
            r in proptest::collection::vec(0.1..10.0f64, 1..6),
            dir in proptest::collection::vec(-1.0..1.0f64, 6),
            eps in 1e-3..1e-1f64,
        ) {
            let n = r.len();
            let g = lqr_integrator_gain(&LqrWeights::diagonal(q, &r), n).unwrap();
            prop_assert!(g.residual < 1e-10 * q.max(1.0));
            let best = closed_loop_cost(q, &r, &g.k);
            let perturbed: Vec<f64> = g.k.iter().zip(&dir).map(|(k, d)| k + eps * d).collect();
            if perturbed.iter().sum::<f64>() > 0.0 {
                prop_assert!(closed_loop_cost(q, &r, &perturbed) >= best - 1e-12);
            }
            // optimal cost equals P for unit initial state
            prop_assert!((best - g.p).abs() < 1e-10 * g.p.max(1.0));
        }

        #[test]
        fn gain_decreases_with_own_cost(
            q in 0.1..10.0f64,
            r in proptest::collection::vec(0.1..10.0f64, 2..6),
            scale in 1.0..5.0f64,
        ) {
            let n = r.len();
            let base = lqr_integrator_gain(&LqrWeights::diagonal(q, &r), n).unwrap();
            let mut r2 = r.clone();
            r2[0] *= scale;
            let more = lqr_integrator_gain(&LqrWeights::diagonal(q, &r2), n).unwrap();
            prop_assert!(more.k[0] <= base.k[0] + 1e-15);
        }

        #[test]
        fn cancellation_identity(pe in -5.0..5.0f64, pref in -5.0..5.0f64) {
            let p = fixtures::gen_params(pref);
            let u = component_control(pe, pref, &p);
            prop_assert!(component_intv_rate(pref, pe, u, &p).abs() < 1e-14 * (1.0 + pe.abs() + pref.abs()));
        }

        #[test]
        fn certificate_is_rank_one_psd(
            m in 0.05..20.0f64, d in 0.0..5.0f64, kt in 0.1..3.0f64,
            tu in 0.001..1.0f64, tg in 0.001..1.0f64, r in 0.01..1.0f64,
        ) {
            let params = GeneratorParams { m, d, k_t: kt, t_u: tu, t_g: tg, r, ..fixtures::gen_params(0.0) };
            let cert = lyapunov_matrix(&params);
            prop_assert!(cert.check().is_psd_rank_one(), "{:?}", cert.check());
        }
    }

    #[test]
    fn area_and_system_control_examples() {
        let g = LqrGain {
            k: vec![FRAC_1_SQRT_2, FRAC_1_SQRT_2],
            p: 0.0,
            residual: 0.0,
        };
        assert_eq!(area_control(0.0, &g, None).unwrap(), vec![-0.0, -0.0]);
        let u = area_control(0.1, &g, None).unwrap();
        assert_abs_diff_eq!(u[0], -0.0707107, epsilon = 1e-7);
        let g = LqrGain {
            k: vec![1.7888544, 0.4472136],
            p: 0.0,
            residual: 0.0,
        };
        let u = area_control(-0.2, &g, None).unwrap();
        assert_abs_diff_eq!(u[0], 0.3577709, epsilon = 1e-7);
        assert_abs_diff_eq!(u[1], 0.0894427, epsilon = 1e-7);
        let u = area_control(-0.2, &g, Some(&[0.1, 0.1])).unwrap();
        assert_eq!(u[0], 0.1);
        assert!(area_control(0.1, &g, Some(&[0.1])).is_err());

        let u = system_control(0.05, &g);
        assert_abs_diff_eq!(u[0], -0.0894427, epsilon = 1e-7);
        assert_abs_diff_eq!(u[1], -0.0223607, epsilon = 1e-7);
        let unit = LqrGain {
            k: vec![1.0, 1.0],
            p: 0.0,
            residual: 0.0,
        };
        assert_eq!(system_control(0.05, &unit), vec![-0.05, -0.05]);
        assert!(system_control(0.0, &unit).iter().all(|u| *u == 0.0));
        assert_eq!(distribute_share(0.3, &[0.5, 0.5]), vec![0.15, 0.15]);
    }

    #[test]
    fn compose_examples() {
        assert_eq!(
            compose_control(0.0, 0.0, 0.0, 0.1),
            Composite {
                value: 0.0,
                saturated: false
            }
        );
        // raw sum lands on the limit (within rounding): value at -0.1, flag only if strictly beyond
        let c = compose_control(0.02, -0.07, -0.05, 0.1);
        assert_abs_diff_eq!(c.value, -0.1, epsilon = 1e-15);
        assert!(!c.saturated);
        let c = compose_control(0.0, -0.1, 0.0, 0.1);
        assert!(!c.saturated);
        let c = compose_control(0.02, 0.01, 0.005, 0.1);
        assert_abs_diff_eq!(c.value, 0.035, epsilon = 1e-15);
        assert!(!c.saturated);
        let c = compose_control(0.2, 0.0, 0.0, 0.1);
        assert_eq!(c.value, 0.1);
        assert!(c.saturated);
    }

    #[test]
    fn conventional_agc_examples() {
        let areas = vec![area("A", vec![0, 1])];
        let params = ConventionalAgcParams {
            bias: vec![20.0],
            k_i: 0.5,
            participation: vec![0.5, 0.5],
            tie_schedule: vec![0.0],
        };
        params.validate(&areas, 2).unwrap();
        let zero = AreaMeasurement {
            delta_omega: 0.0,
            tie_flow: 0.0,
        };
        let s = conventional_agc_step(&[zero], &params, &areas, &[0.2], 0.01).unwrap();
        assert_eq!(s.ace, vec![0.0]);
        assert_eq!(s.integral, vec![0.2]);
        assert_abs_diff_eq!(s.u[0], -0.05, epsilon = 1e-15);
        assert_abs_diff_eq!(s.u[1], -0.05, epsilon = 1e-15);

        let m = AreaMeasurement {
            delta_omega: 0.01,
            tie_flow: 0.1,
        };
        let s = conventional_agc_step(&[m], &params, &areas, &[0.0], 0.01).unwrap();
        assert_abs_diff_eq!(s.ace[0], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(s.integral[0], 0.003, epsilon = 1e-15);

        assert!(conventional_agc_step(&[m], &params, &areas, &[0.0], 0.0).is_err());
        let mut bad = params.clone();
        bad.participation = vec![0.5, 0.4];
        assert!(bad.validate(&areas, 2).is_err());
    }

    #[test]
    fn lemma1_examples() {
        let p = fixtures::gen_params(0.2);
        let c = lemma1_condition(0.2, 0.2, &p);
        assert!(c.holds);
        assert_abs_diff_eq!(c.margin, 2.0, epsilon = 1e-12);
        let c = lemma1_condition(0.4, 0.2, &p);
        assert!(c.holds);
        assert_abs_diff_eq!(c.margin, 1.8, epsilon = 1e-12);
        let c = lemma1_condition(3.2, 0.2, &p);
        assert!(!c.holds);
        assert_abs_diff_eq!(c.margin, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn unit_certificate() {
        let p = GeneratorParams {
            m: 1.0,
            d: 1.0,
            k_t: 1.0,
            r: 1.0,
            t_u: 1.0,
            t_g: 1.0,
            ..fixtures::gen_params(0.0)
        };
        let c = lyapunov_matrix(&p);
        assert_eq!(c.t1, [2.0, 1.0, 1.0, 1.0]);
        assert_eq!(c.t2, [0.0, 1.0, 1.0, 1.0]);
        let expected = [
            [12.0, 6.0, 6.0, 6.0],
            [6.0, 3.0, 3.0, 3.0],
            [6.0, 3.0, 3.0, 3.0],
            [6.0, 3.0, 3.0, 3.0],
        ];
        assert_eq!(c.p, expected);
        assert!(c.check().is_psd_rank_one());
        assert_eq!(c.value(&[1.0, 0.0, 0.0, 0.0]), 12.0);
    }
}
