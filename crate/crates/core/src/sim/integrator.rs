//! Classical fixed-step fourth-order Runge–Kutta.

/// One RK4 step of `ẋ = f(t, x)`. Errors from `f` propagate unchanged.
pub fn rk4_step<F, E>(mut f: F, x: &[f64], t: f64, dt: f64) -> Result<Vec<f64>, E>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>, E>,
{
    debug_assert!(dt > 0.0);
    let n = x.len();
    let h2 = 0.5 * dt;
    let k1 = f(t, x)?;
    let mut tmp: Vec<f64> = (0..n).map(|i| x[i] + h2 * k1[i]).collect();
    let k2 = f(t + h2, &tmp)?;
    for i in 0..n {
        tmp[i] = x[i] + h2 * k2[i];
    }
    let k3 = f(t + h2, &tmp)?;
    for i in 0..n {
        tmp[i] = x[i] + dt * k3[i];
    }
    let k4 = f(t + dt, &tmp)?;
    Ok((0..n)
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}
