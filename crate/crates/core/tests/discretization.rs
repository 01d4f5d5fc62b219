mod common;

use common::{nominal, random_model, random_vec, v};
use nalgebra::DVector;
use pidpbc_core::discretize::{
    euler_step, midpoint_step_explicit, midpoint_step_newton, reference_trajectory, StepperSettings,
};
use pidpbc_core::verify::{order_check, Integrator};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn explicit_and_newton_midpoint_agree_on_random_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=4);
        let m = rng.random_range(1..=2);
        let model = random_model(&mut rng, n, m);
        let x = random_vec(&mut rng, n, 2.0);
        let u = DVector::from_fn(m, |_, _| rng.random_range(-1.0..2.0));
        let delta = 10f64.powf(rng.random_range(-5.0..-2.0));
        let xe = midpoint_step_explicit(&model, &x, &u, delta).unwrap();
        let xn = midpoint_step_newton(&model, &x, &u, &StepperSettings::with_delta(delta))
            .unwrap()
            .x_next;
        worst = worst.max((&xe - &xn).norm() / (1.0 + xe.norm()));
    }
    assert!(worst <= 1e-10, "worst relative disagreement {worst:e}");
}

#[test]
fn shifted_input_matrix_is_energy_neutral() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..500 {
        let n = rng.random_range(1..=5);
        let m = rng.random_range(1..=3);
        let model = random_model(&mut rng, n, m);
        let x = random_vec(&mut rng, n, 3.0);
        let xs = random_vec(&mut rng, n, 3.0);
        let dg = model.eval_input_matrix(&x).unwrap() - model.eval_input_matrix(&xs).unwrap();
        let lhs = (&x - &xs).transpose() * model.q() * dg;
        let scale = (&x - &xs).norm() * (model.q() * &x).norm().max(1.0);
        assert!(lhs.amax() <= 1e-12 * scale.max(1.0), "{lhs}");
    }
}

#[test]
fn midpoint_is_second_order_on_buck_boost() {
    let (_, m) = nominal();
    let deltas = [2e-5, 1e-5, 5e-6, 2.5e-6];
    let r = order_check(
        &m,
        &v(&[0.0, 0.0]),
        |_| v(&[0.5]),
        &deltas,
        0.5,
        Integrator::Midpoint,
        10,
    )
    .unwrap();
    for w in r.errors.windows(2) {
        let ratio = w[0] / w[1];
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }
}

#[test]
fn order_check_is_degenerate_at_equilibrium() {
    let (p, m) = nominal();
    let eq = pidpbc_core::buck_boost_reference(&p, 35.0).unwrap();
    let us = eq.u_star.clone();
    for method in [Integrator::Midpoint, Integrator::Euler] {
        let r = order_check(
            &m,
            &eq.x_star,
            |_| us.clone(),
            &[1e-4, 5e-5, 2.5e-5],
            0.01,
            method,
            10,
        )
        .unwrap();
        assert_eq!(r.exponent, None, "{r:?}");
    }
}

#[test]
fn order_check_validates_grid() {
    let (_, m) = nominal();
    let x0 = v(&[0.0, 0.0]);
    assert!(order_check(
        &m,
        &x0,
        |_| v(&[0.5]),
        &[1e-4, 5e-5],
        0.01,
        Integrator::Midpoint,
        10
    )
    .is_err());
    assert!(order_check(
        &m,
        &x0,
        |_| v(&[0.5]),
        &[1e-4, 5e-5, 3e-5],
        0.01,
        Integrator::Midpoint,
        10
    )
    .is_err());
    assert!(order_check(
        &m,
        &x0,
        |_| v(&[0.5]),
        &[3e-4, 1.5e-4, 7.5e-5],
        0.001,
        Integrator::Midpoint,
        10
    )
    .is_err());
}

#[test]
fn unforced_midpoint_dissipates_at_the_damping_rate() {
    let (_, m) = nominal();
    let delta = 1e-3;
    let u = v(&[0.0]);
    let origin = v(&[0.0, 0.0]);
    // G0 = 0, so the origin is the unforced equilibrium.
    assert_eq!(m.eval_field(&origin, &u).unwrap(), origin);
    let mut x = v(&[1e-3, 0.0]);
    for _ in 0..500 {
        let xn = midpoint_step_explicit(&m, &x, &u, delta).unwrap();
        let z = (&x + &xn) * 0.5;
        let qz = m.q() * &z;
        let dh = (&xn - &x).dot(&qz) / delta;
        assert!(m.hamiltonian(&xn).unwrap() <= m.hamiltonian(&x).unwrap());
        let diss = -qz.dot(&(m.r() * &qz));
        assert!(dh <= 0.0);
        // Rounding in x_{k+1} - x_k bounds the attainable agreement.
        let scale = x.norm() * qz.norm() / delta;
        assert!((dh - diss).abs() <= 1e-12 * scale, "{dh} {diss}");
        x = xn;
    }
}

#[test]
fn reference_trajectory_matches_rk4_hold_per_interval() {
    let (_, m) = nominal();
    let us = vec![v(&[0.2]), v(&[0.6]), v(&[0.4])];
    let traj = reference_trajectory(&m, &v(&[0.0, 0.0]), &us, 1e-3, 40).unwrap();
    assert_eq!(traj.len(), 4);
    let mut x = v(&[0.0, 0.0]);
    for (k, u) in us.iter().enumerate() {
        x = pidpbc_core::rk4_hold(&m, &x, u, 1e-3, 40).unwrap();
        assert_eq!(x, traj[k + 1]);
    }
}

#[test]
fn euler_is_first_order_consistent() {
    let (_, m) = nominal();
    let x = v(&[2e-3, 1e-2]);
    let u = v(&[0.3]);
    let f = m.eval_field(&x, &u).unwrap();
    for delta in [1e-4, 1e-5, 1e-6] {
        let xe = euler_step(&m, &x, &u, delta).unwrap();
        assert!(((&xe - &x) / delta - &f).norm() <= 1e-9 * f.norm());
    }
}
