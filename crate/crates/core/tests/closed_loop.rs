mod common;

use common::{nominal, random_model};
use nalgebra::DMatrix;
use pidpbc_core::engine::{run_scenario, Mode, Scenario, ScheduleEntry, Target};
use pidpbc_core::verify::{self, trajectory_steps, CheckOutcome, DampingReport};
use pidpbc_core::{controller, Error, Gains, Traj};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-8;

fn scenario(gains: (f64, f64, f64), delta: f64, t_final: f64, mode: Mode) -> Scenario<f64> {
    let (p, _) = nominal();
    Scenario::buck_boost(
        p,
        Gains::scalar(gains.0, gains.1, gains.2).unwrap(),
        delta,
        t_final,
        35.0,
        mode,
    )
}

fn step_scenario(delta: f64) -> Scenario<f64> {
    let mut s = scenario((0.1, 0.1, 6e-4), delta, 1.0, Mode::DtMidpoint);
    s.schedule = vec![
        ScheduleEntry {
            time: 0.0,
            target: Target::Voltage(18.0),
        },
        ScheduleEntry {
            time: 0.5,
            target: Target::Voltage(35.0),
        },
    ];
    s
}

fn all_checks(tr: &Traj, s: &Scenario<f64>) -> Vec<CheckOutcome<f64>> {
    let model = s.plant.model().unwrap();
    verify::run_all_checks(
        &trajectory_steps(tr),
        tr.mode,
        &model,
        &s.gains,
        &tr.segments,
        tr.delta,
        TOL,
    )
    .unwrap()
}

#[test]
fn equilibrium_start_has_zero_residuals() {
    let mut s = scenario((0.1, 0.1, 6e-4), 5e-3, 0.5, Mode::DtMidpoint);
    let (p, _) = nominal();
    let eq = pidpbc_core::buck_boost_reference(&p, 35.0).unwrap();
    s.x0 = eq.x_star.clone();
    s.xi0 = controller::xi_star(&s.gains, &eq).unwrap();
    let tr = run_scenario(&s).unwrap();
    for c in all_checks(&tr, &s) {
        let CheckOutcome::Ran(r) = c else {
            panic!("skipped")
        };
        assert!(r.max_violation <= 1e-14, "{r:?}");
    }
    assert!(tr
        .records
        .iter()
        .all(|r| r.v.abs() <= 1e-20 && r.dv.abs() <= 1e-20));
}

#[test]
fn fig2_scenario_satisfies_every_identity() {
    for delta in [1e-3, 5e-3, 2e-2] {
        let s = scenario((0.1, 0.1, 6e-4), delta, 3.0, Mode::DtMidpoint);
        let tr = run_scenario(&s).unwrap();
        for c in all_checks(&tr, &s) {
            let CheckOutcome::Ran(r) = c else {
                panic!("skipped")
            };
            assert!(r.passed, "delta {delta}: {r:?}");
            assert_eq!(r.steps_checked, tr.records.len());
        }
    }
}

#[test]
fn reference_step_is_certified_per_segment() {
    let s = step_scenario(5e-3);
    let tr = run_scenario(&s).unwrap();
    assert_eq!(tr.segments.len(), 2);
    assert!(all_checks(&tr, &s).iter().all(|c| c.passed()));
}

#[test]
fn stale_equilibrium_is_localized_to_the_switch_step() {
    let truth = step_scenario(5e-3);
    // An engine that never refreshes the equilibrium after the reference step.
    let mut stale = truth.clone();
    stale.schedule.truncate(1);
    let tr = run_scenario(&stale).unwrap();
    let model = truth.plant.model().unwrap();
    let segments = truth.segments().unwrap();
    let r = verify::check_controller_passivity(
        &trajectory_steps(&tr),
        &model,
        &truth.gains,
        &segments,
        tr.delta,
        TOL,
    )
    .unwrap();
    assert!(!r.passed);
    assert_eq!(r.first_violation, Some(100));
    let r = verify::check_lyapunov(
        &trajectory_steps(&tr),
        &model,
        &truth.gains,
        &segments,
        tr.delta,
        TOL,
    )
    .unwrap();
    assert_eq!(r.first_violation, Some(100));
}

#[test]
fn tampered_record_is_detected() {
    let s = scenario((0.1, 0.1, 6e-4), 5e-3, 0.5, Mode::DtMidpoint);
    let mut tr = run_scenario(&s).unwrap();
    tr.records[40].u[0] += 1e-3;
    let model = s.plant.model().unwrap();
    let r =
        verify::check_plant_passivity(&trajectory_steps(&tr), &model, &tr.segments, tr.delta, TOL)
            .unwrap();
    assert!(!r.passed);
    assert_eq!(r.worst_step, Some(40));
}

#[test]
fn euler_trajectory_is_outside_the_midpoint_certificates() {
    let s = scenario((1e-4, 1e-4, 1e-3), 6e-2, 3.0, Mode::DtEuler);
    let tr = run_scenario(&s).unwrap();
    let model = s.plant.model().unwrap();
    let steps = trajectory_steps(&tr);
    assert!(matches!(
        verify::check_plant_passivity(&steps, &model, &tr.segments, tr.delta, TOL),
        Err(Error::WrongMode(_))
    ));
    let lyap =
        verify::check_lyapunov(&steps, &model, &s.gains, &tr.segments, tr.delta, TOL).unwrap();
    assert!(!lyap.passed);
    assert!(lyap.first_violation.is_some());
    let outcomes = all_checks(&tr, &s);
    let skipped: Vec<_> = outcomes
        .iter()
        .filter(|c| matches!(c, CheckOutcome::Skipped { .. }))
        .map(|c| c.name())
        .collect();
    assert_eq!(skipped, ["plant-passivity", "lyapunov"]);
}

#[test]
fn lyapunov_rate_equals_plant_plus_controller_rates() {
    let s = scenario((0.5, 0.2, 1e-3), 5e-3, 1.0, Mode::DtMidpoint);
    let tr = run_scenario(&s).unwrap();
    let (_, m) = nominal();
    let eq = &tr.segments[0].eq;
    let d = verify::damping_injection(&m, eq, &s.gains).unwrap().matrix;
    for r in &tr.records {
        let z = r.z.as_ref().unwrap();
        let qz = m.q() * (z - &eq.x_star);
        let yt = &r.y - &eq.y_star;
        let ut = &r.u - &eq.u_star;
        let plant = -qz.dot(&(m.r() * &qz)) + yt.dot(&ut);
        let ctrl = -yt.dot(&(&s.gains.kp * &yt)) - yt.dot(&ut);
        let lyap = -qz.dot(&(&d * &qz));
        let scale = plant.abs().max(ctrl.abs()).max(1.0);
        assert!((plant + ctrl - lyap).abs() <= 1e-12 * scale);
        assert!(
            (r.dv - lyap).abs() <= TOL * lyap.abs().max(1.0),
            "k={} {} {}",
            r.k,
            r.dv,
            lyap
        );
    }
}

#[test]
fn damping_injection_examples() {
    let (p, m) = nominal();
    let eq = pidpbc_core::buck_boost_reference(&p, 35.0).unwrap();
    let rep = verify::damping_injection(&m, &eq, &Gains::scalar(0.1, 0.1, 6e-4).unwrap()).unwrap();
    assert!(rep.satisfied && rep.alpha > 0.0);
    let sym = &rep.matrix - rep.matrix.transpose();
    assert!(sym.amax() == 0.0);
    // Independent eigenvalue oracle: closed form for a symmetric 2x2.
    let (a, b, c) = (rep.matrix[(0, 0)], rep.matrix[(0, 1)], rep.matrix[(1, 1)]);
    let lam = 0.5 * (a + c) - (0.25 * (a - c).powi(2) + b * b).sqrt();
    assert!((rep.alpha - lam).abs() <= 1e-12 * a.abs().max(c.abs()));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let strict = loop {
        let model = random_model(&mut rng, 3, 1);
        if pidpbc_core::linalg::is_positive_definite(model.r()) {
            break model;
        }
    };
    for kp in [0.0, 1e-6, 3.0] {
        let g = DMatrix::from_fn(3, 1, |i, _| i as f64 - 1.0);
        let rep =
            DampingReport::from_parts(strict.r(), &g, &DMatrix::from_element(1, 1, kp)).unwrap();
        assert!(rep.satisfied);
    }
}

#[test]
fn random_gains_keep_v_nonincreasing() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..20 {
        let g: Vec<f64> = (0..3)
            .map(|_| 10f64.powf(rng.random_range(-4.0..1.0)))
            .collect();
        let s = scenario((g[0], g[1], g[2]), 5e-3, 0.5, Mode::DtMidpoint);
        let tr = run_scenario(&s).unwrap();
        assert!(!tr.summary.diverged);
        assert!(
            tr.records.iter().all(|r| r.dv <= TOL * r.v.abs().max(1.0)),
            "{g:?}"
        );
    }
}

#[test]
fn emulation_stays_bounded_and_is_checked_for_controller_passivity_only() {
    let mut s = scenario((1e-3, 1e-5, 1e-6), 5e-5, 0.02, Mode::Emulation);
    s.settings.stepper.substeps = 10;
    let tr = run_scenario(&s).unwrap();
    assert!(!tr.summary.diverged);
    let outcomes = all_checks(&tr, &s);
    assert_eq!(
        outcomes
            .iter()
            .filter(|c| matches!(c, CheckOutcome::Ran(_)))
            .count(),
        2
    );
}

#[test]
fn single_precision_loop_runs() {
    let p = pidpbc_core::BuckBoost32::nominal();
    let s = Scenario::buck_boost(
        p,
        pidpbc_core::Gains32::scalar(0.1, 0.1, 6e-4).unwrap(),
        5e-3,
        3.0,
        35.0,
        Mode::DtMidpoint,
    );
    let tr = run_scenario(&s).unwrap();
    assert!(!tr.summary.diverged);
    assert!(
        (tr.summary.final_output - 35.0).abs() < 0.35,
        "{}",
        tr.summary.final_output
    );
    let model = s.plant.model().unwrap();
    let r = verify::check_lyapunov(
        &trajectory_steps(&tr),
        &model,
        &s.gains,
        &tr.segments,
        tr.delta,
        1e-2,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}
