//! Time-stepping kernels for the converter model under a held input.
//!
//! The implicit midpoint rule `x+ = x + delta F((x + x+)/2)` is the plant
//! discretization the controller is designed for. Because the vector field
//! is affine in `x` once `u` is frozen, the step has the closed form
//! `x+ = A(u) x + B(u) E`; the Newton path solves the same relation in the
//! midpoint variable `z = (x + x+)/2` and is kept as an independent route.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, check_len};
use crate::model::BilinearPHModel;
use crate::scalar::Scalar;

/// Sampling time and solver knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepperSettings<T: Scalar> {
    /// Sampling time (s).
    pub delta: T,
    /// Absolute tolerance on the Newton residual norm.
    pub newton_tol: T,
    pub newton_max_iter: usize,
    /// Refinement of the reference integrator per sampling interval.
    pub substeps: usize,
}

impl<T: Scalar> StepperSettings<T> {
    /// Defaults: `newton_tol = 1e-12`, 50 iterations, 100 substeps.
    pub fn with_delta(delta: T) -> Self {
        Self {
            delta,
            newton_tol: T::default_newton_tol(),
            newton_max_iter: 50,
            substeps: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > T::zero()) || !self.delta.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "delta must be positive, got {}",
                self.delta
            )));
        }
        if !(self.newton_tol > T::zero()) {
            return Err(Error::InvalidParameter(
                "newton_tol must be positive".into(),
            ));
        }
        if self.newton_max_iter == 0 {
            return Err(Error::InvalidParameter(
                "newton_max_iter must be at least 1".into(),
            ));
        }
        if self.substeps == 0 {
            return Err(Error::InvalidParameter(
                "substeps must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// `N(u) = J0 - R + sum u_i J_i` and `M(u) = G0 + sum u_i G_i`.
pub fn build_nm<T: Scalar>(
    model: &BilinearPHModel<T>,
    u: &DVector<T>,
) -> Result<(DMatrix<T>, DMatrix<T>)> {
    check_len(u, model.m(), "input")?;
    Ok(nm(model, u))
}

pub(crate) fn nm<T: Scalar>(
    model: &BilinearPHModel<T>,
    u: &DVector<T>,
) -> (DMatrix<T>, DMatrix<T>) {
    let mut n = model.j0() - model.r();
    let mut m = model.g0().clone();
    for (i, (ji, gi)) in model.j().iter().zip(model.g()).enumerate() {
        n += ji * u[i];
        m += gi * u[i];
    }
    (n, m)
}

fn check_step_inputs<T: Scalar>(
    model: &BilinearPHModel<T>,
    x: &DVector<T>,
    u: &DVector<T>,
    delta: T,
) -> Result<()> {
    check_len(x, model.n(), "state")?;
    check_len(u, model.m(), "input")?;
    if !(delta > T::zero()) {
        return Err(Error::InvalidParameter(format!(
            "delta must be positive, got {delta}"
        )));
    }
    Ok(())
}

/// Midpoint step in closed form:
/// `x+ = [I - d/2 N Q]^{-1} ([I + d/2 N Q] x + d M E)`.
pub fn midpoint_step_explicit<T: Scalar>(
    model: &BilinearPHModel<T>,
    x: &DVector<T>,
    u: &DVector<T>,
    delta: T,
) -> Result<DVector<T>> {
    check_step_inputs(model, x, u, delta)?;
    let (n, m) = nm(model, u);
    let half = delta * T::lit(0.5);
    let nq = n * model.q();
    let id = DMatrix::identity(model.n(), model.n());
    let lhs = &id - &nq * half;
    let rhs = (&id + &nq * half) * x + m * model.e() * delta;
    linalg::solve_conditioned(&lhs, &rhs).map_err(|c| Error::SingularStepMatrix {
        condition: c.as_f64(),
    })
}

/// Result of a Newton-solved midpoint step.
#[derive(Debug, Clone, PartialEq)]
pub struct MidpointSolution<T: Scalar> {
    pub x_next: DVector<T>,
    /// Midpoint `(x + x_next) / 2`.
    pub z: DVector<T>,
    pub iters: usize,
}

/// Midpoint step by Newton iteration on `z = x + d/2 (f(z) + g(z) u)`, seeded at `x`.
pub fn midpoint_step_newton<T: Scalar>(
    model: &BilinearPHModel<T>,
    x: &DVector<T>,
    u: &DVector<T>,
    settings: &StepperSettings<T>,
) -> Result<MidpointSolution<T>> {
    settings.validate()?;
    check_step_inputs(model, x, u, settings.delta)?;
    let half = settings.delta * T::lit(0.5);
    let id = DMatrix::identity(model.n(), model.n());
    let (n, _) = nm(model, u);
    let jac = &id - n * model.q() * half;
    let sol = damped_newton(
        |z| z - x - model.field(z, u) * half,
        |_| jac.clone(),
        x.clone(),
        settings.newton_tol * (T::one() + x.norm()),
        settings.newton_max_iter,
    )?;
    let x_next = &sol.z * T::lit(2.0) - x;
    Ok(MidpointSolution {
        x_next,
        z: sol.z,
        iters: sol.iters,
    })
}

/// Forward Euler `x + d (f(x) + g(x) u)`.
pub fn euler_step<T: Scalar>(
    model: &BilinearPHModel<T>,
    x: &DVector<T>,
    u: &DVector<T>,
    delta: T,
) -> Result<DVector<T>> {
    check_step_inputs(model, x, u, delta)?;
    Ok(x + model.field(x, u) * delta)
}

/// Classical fourth-order integration over one held-input interval of
/// length `delta`, split into `substeps` equal steps.
pub fn rk4_hold<T: Scalar>(
    model: &BilinearPHModel<T>,
    x: &DVector<T>,
    u: &DVector<T>,
    delta: T,
    substeps: usize,
) -> Result<DVector<T>> {
    check_step_inputs(model, x, u, delta)?;
    if substeps == 0 {
        return Err(Error::InvalidParameter(
            "substeps must be at least 1".into(),
        ));
    }
    Ok(rk4_affine(model, x, u, delta, substeps))
}

// With u frozen the field is affine, F(x) = A x + b.
fn rk4_affine<T: Scalar>(
    model: &BilinearPHModel<T>,
    x: &DVector<T>,
    u: &DVector<T>,
    delta: T,
    substeps: usize,
) -> DVector<T> {
    let (n, m) = nm(model, u);
    let a = n * model.q();
    let b = m * model.e();
    let h = delta / T::lit(substeps as f64);
    let (h2, h6) = (h * T::lit(0.5), h / T::lit(6.0));
    let f = |x: &DVector<T>| &a * x + &b;
    let mut x = x.clone();
    for _ in 0..substeps {
        let k1 = f(&x);
        let k2 = f(&(&x + &k1 * h2));
        let k3 = f(&(&x + &k2 * h2));
        let k4 = f(&(&x + &k3 * h));
        x += (k1 + (k2 + k3) * T::lit(2.0) + k4) * h6;
    }
    x
}

/// Fine reference solution under the zero-order-held schedule `u_schedule[k]`
/// on `[k delta, (k+1) delta)`. Returns the samples at every coarse instant,
/// starting with `x0` (length `u_schedule.len() + 1`).
pub fn reference_trajectory<T: Scalar>(
    model: &BilinearPHModel<T>,
    x0: &DVector<T>,
    u_schedule: &[DVector<T>],
    delta: T,
    substeps: usize,
) -> Result<Vec<DVector<T>>> {
    check_len(x0, model.n(), "initial state")?;
    let mut out = Vec::with_capacity(u_schedule.len() + 1);
    out.push(x0.clone());
    let mut x = x0.clone();
    for u in u_schedule {
        x = rk4_hold(model, &x, u, delta, substeps)?;
        out.push(x.clone());
    }
    Ok(out)
}

pub(crate) struct NewtonSolution<T: Scalar> {
    pub z: DVector<T>,
    pub iters: usize,
}

const MAX_HALVINGS: usize = 6;

/// Damped Newton with step halving on residual increase. Once the tolerance
/// is met one more full step is tried and kept if it lowers the residual, so
/// converged iterates sit at rounding level rather than just below `tol`.
pub(crate) fn damped_newton<T, R, J>(
    residual: R,
    jacobian: J,
    z0: DVector<T>,
    tol: T,
    max_iter: usize,
) -> Result<NewtonSolution<T>>
where
    T: Scalar,
    R: Fn(&DVector<T>) -> DVector<T>,
    J: Fn(&DVector<T>) -> DMatrix<T>,
{
    let mut z = z0;
    let mut r = residual(&z);
    let mut rn = r.norm();
    let mut iters = 0;
    let mut polished = false;
    while iters < max_iter {
        if !rn.is_finite() {
            break;
        }
        if rn <= tol {
            if polished || rn == T::zero() {
                break;
            }
            polished = true;
        }
        let jac = jacobian(&z);
        let dz = linalg::solve_conditioned(&jac, &(-&r)).map_err(|c| Error::SingularJacobian {
            condition: c.as_f64(),
        })?;
        iters += 1;
        let mut lambda = T::one();
        let mut cand = &z + &dz;
        let mut cr = residual(&cand);
        let mut crn = cr.norm();
        let mut halvings = 0;
        while !(crn < rn) && halvings < MAX_HALVINGS {
            lambda *= T::lit(0.5);
            cand = &z + &dz * lambda;
            cr = residual(&cand);
            crn = cr.norm();
            halvings += 1;
        }
        if rn <= tol && !(crn < rn) {
            break;
        }
        z = cand;
        r = cr;
        rn = crn;
    }
    if rn <= tol {
        Ok(NewtonSolution { z, iters })
    } else {
        Err(Error::NoConvergence {
            iters,
            residual: rn.as_f64(),
        })
    }
}
