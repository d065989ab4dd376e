mod common;

use eagc_sim::intv::component_intv_from_state;
use eagc_sim::models::GeneratorState;
use eagc_sim::sim::runner::{initial_condition, state_names};
use eagc_sim::sim::{
    compute_metrics, run_scenario, ControllerKind, Initialization, MetricsError, SimError, Trajectory,
};

use common::*;

fn final_state(traj: &Trajectory, names: &[String]) -> Vec<f64> {
    names
        .iter()
        .map(|n| *traj.series(n).expect("state column").last().unwrap())
        .collect()
}

#[test]
fn equilibrium_without_disturbance_stays_put() {
    let doc = with_horizon(fivebus_quiet(), 2.0);
    let scenario = doc.build().unwrap();
    for kind in ControllerKind::ALL {
        let traj = run_scenario(&scenario, kind).unwrap();
        for (g, id) in traj.generator_ids.iter().enumerate() {
            let w = traj.series(&format!("gen.{id}.omega")).unwrap();
            let dev = w.iter().map(|w| (w - traj.omega_ref[g]).abs()).fold(0.0, f64::max);
            assert!(dev < 1e-9, "{kind} {id}: {dev:e}");
        }
    }
}

#[test]
fn power_bookkeeping_closes_at_every_record() {
    for doc in [with_horizon(fivebus_quiet(), 1.0), with_horizon(fivebus(), 2.0)] {
        let traj = run_scenario(&doc.build().unwrap(), ControllerKind::Eagc).unwrap();
        let res = traj.series("power_residual").unwrap();
        assert!(
            res.iter().all(|r| *r < 1e-9),
            "{:e}",
            res.iter().cloned().fold(0.0, f64::max)
        );
        assert!(traj.diagnostics.max_power_residual < 1e-9);
    }
}

#[test]
fn identical_inputs_give_identical_trajectories() {
    let scenario = with_horizon(fivebus(), 1.5).build().unwrap();
    let a = run_scenario(&scenario, ControllerKind::Eagc).unwrap();
    let b = run_scenario(&scenario, ControllerKind::Eagc).unwrap();
    assert_eq!(a, b);
    let mut other = scenario.clone();
    other.seed = 99;
    let c = run_scenario(&other, ControllerKind::Eagc).unwrap();
    assert_ne!(a.columns, c.columns);
}

#[test]
fn recording_decimates_the_held_controls() {
    let mut doc = with_horizon(fivebus(), 2.0);
    doc.solver.control_dt = 0.01;
    doc.solver.record_dt = 0.01;
    let fine = run_scenario(&doc.build().unwrap(), ControllerKind::Eagc).unwrap();
    doc.solver.record_dt = 0.02;
    let coarse = run_scenario(&doc.build().unwrap(), ControllerKind::Eagc).unwrap();
    assert_eq!(coarse.len(), 101);
    for id in &fine.generator_ids {
        let f = fine.series(&format!("u.{id}.total")).unwrap();
        let c = coarse.series(&format!("u.{id}.total")).unwrap();
        for (k, v) in c.iter().enumerate() {
            assert_eq!(*v, f[2 * k]);
        }
    }
}

#[test]
fn slower_control_updates_hold_longer() {
    let mut doc = with_horizon(fivebus(), 2.0);
    doc.solver.control_dt = 0.05;
    doc.solver.record_dt = 0.05;
    let traj = run_scenario(&doc.build().unwrap(), ControllerKind::Conventional).unwrap();
    assert_eq!(traj.len(), 41);
    assert_eq!(traj.diagnostics.control_steps, 40);
}

#[test]
fn intv_accumulators_match_closed_form_and_rate_integral() {
    // continuous forcing only, so the trapezoid rule applies to the imbalance
    let mut doc = with_horizon(fivebus_smooth(), 3.0);
    doc.disturbances
        .retain(|d| d.kind == eagc_sim::cli::scenario::DisturbanceKindDoc::Sinusoid);
    let scenario = doc.build().unwrap();
    let (topo, _) = initial_condition(&scenario.topology, &scenario.initialization, scenario.solver.dt).unwrap();
    let traj = run_scenario(&scenario, ControllerKind::Eagc).unwrap();
    let dt = traj.record_dt;
    for (g, id) in traj.generator_ids.iter().enumerate() {
        let p = &topo.generators()[g].params;
        let col = |f: &str| traj.series(&format!("gen.{id}.{f}")).unwrap();
        let (delta, omega, pm, a) = (col("delta"), col("omega"), col("p_m"), col("a"));
        let z = traj.series(&format!("z_c.{id}")).unwrap();
        let rate = traj.series(&format!("z_c_dot.{id}")).unwrap();
        let u = traj.series(&format!("u.{id}.total")).unwrap();
        // the input term is held, the imbalance term is smooth
        let smooth: Vec<f64> = rate.iter().zip(u).map(|(r, u)| r - p.gain() * u).collect();
        let closed = |i: usize| {
            component_intv_from_state(
                &GeneratorState {
                    delta: delta[i],
                    omega: omega[i],
                    p_m: pm[i],
                    a: a[i],
                },
                p,
            )
        };
        let mut integral = 0.0;
        let mut worst = 0.0f64;
        for i in 1..traj.len() {
            integral += 0.5 * dt * (smooth[i - 1] + smooth[i]) + dt * p.gain() * u[i - 1];
            let from_states = closed(i) - closed(0);
            assert!((z[i] - z[0] - from_states).abs() < 1e-9, "{id} t={}", traj.time[i]);
            let e = (z[i] - z[0] - integral).abs();
            worst = worst.max(e);
        }
        assert!(worst < 1e-5, "{id}: {worst:e}");
    }
}

#[test]
fn rk4_converges_at_fourth_order_on_the_reference_scenario() {
    let base = with_horizon(fivebus_smooth(), 1.5);
    let names = state_names(&base.build().unwrap().topology);
    let run = |dt: f64| {
        let mut d = base.clone();
        d.solver.dt = dt;
        final_state(
            &run_scenario(&d.build().unwrap(), ControllerKind::Eagc).unwrap(),
            &names,
        )
    };
    let dt = base.solver.dt;
    let reference = run(dt / 8.0);
    let err = |x: Vec<f64>| x.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let e1 = err(run(dt));
    let e2 = err(run(dt / 2.0));
    assert!(e1 / e2 >= 12.0, "ratio {} ({e1:e} / {e2:e})", e1 / e2);
}

#[test]
fn divergence_aborts_with_diagnostic() {
    let mut scenario = with_horizon(fivebus_quiet(), 1.0).build().unwrap();
    let mut state = scenario.topology.zero_state();
    for g in &mut state.generators {
        g.omega = 1.0;
    }
    state.generators[0].delta = 2e6;
    scenario.initialization = Initialization::Explicit(state);
    match run_scenario(&scenario, ControllerKind::Primary) {
        Err(SimError::Diverged { what, .. }) => assert_eq!(what, "gen.G1.delta"),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn lemma1_violation_is_logged_not_fatal() {
    let mut doc = with_horizon(fivebus(), 2.0);
    for g in &mut doc.generators {
        g.u_max = 1e-3;
    }
    let traj = run_scenario(&doc.build().unwrap(), ControllerKind::Eagc).unwrap();
    assert!(traj.diagnostics.lemma1_violations > 0);
    assert!(traj.diagnostics.saturation_events > 0);
    let m = traj.series("lemma1_margin.G1").unwrap();
    assert!(m.iter().any(|v| *v < 0.0));
}

#[test]
fn metrics_need_ten_seconds_after_the_last_disturbance() {
    let traj = run_scenario(&with_horizon(fivebus(), 5.0).build().unwrap(), ControllerKind::Primary).unwrap();
    assert!(matches!(
        compute_metrics(&traj, &[1.0; 4]),
        Err(MetricsError::HorizonTooShort { .. })
    ));
}

#[test]
fn primary_only_leaves_offset_and_oscillation() {
    let traj = run_scenario(&with_horizon(fivebus(), 15.0).build().unwrap(), ControllerKind::Primary).unwrap();
    let m = compute_metrics(&traj, &[1.0; 4]).unwrap();
    assert!(m.system.mean_abs_steady_state_error > 1e-3);
    assert!(m.system.band_energy > 0.0);
    assert_eq!(m.system.control_cost, 0.0);
}

#[test]
fn flat_settle_reaches_a_steady_start() {
    let mut doc = with_horizon(fivebus_quiet(), 1.0);
    doc.initialization.method = eagc_sim::cli::scenario::InitMethod::FlatSettle;
    doc.initialization.settle_time = Some(1.0);
    let scenario = doc.build().unwrap();
    let (_, state) = initial_condition(&scenario.topology, &scenario.initialization, scenario.solver.dt).unwrap();
    assert!(state.is_finite());
    assert!(state.z_c.iter().all(|z| *z == 0.0));
    let traj = run_scenario(&scenario, ControllerKind::Primary).unwrap();
    assert!(traj.series("gen.G1.omega").unwrap().iter().all(|w| w.is_finite()));
}
