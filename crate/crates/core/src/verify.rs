//! Executable versions of the passivity and stability identities.
//!
//! Every check is an exact identity in real arithmetic; tolerances are
//! relative, scaled per step by `max(1, |lhs|, |rhs|)`.
//!
//! Checks consume [`StepView`]s, which can be built from an in-memory
//! [`Trajectory`] or from consecutive rows of a logged trajectory. Energy
//! differences are evaluated in factored form (`dx' Q x~_mid` instead of
//! `H(x+) - H(x)`) to avoid cancellation on large states.

use nalgebra::{DMatrix, DVector};

use crate::controller::PidGains;
use crate::discretize;
use crate::engine::{segment_index, Mode, ReferenceSegment, StepRecord, Trajectory};
use crate::error::{Error, Result};
use crate::linalg::{self, check_len, rel_scale};
use crate::model::{BilinearPHModel, EquilibriumSpec};
use crate::scalar::Scalar;

/// Default relative tolerance of the identity checks.
pub fn default_tolerance<T: Scalar>() -> T {
    T::lit(1e-8)
}

/// `R + g* K_P g*'` and its smallest eigenvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct DampingReport<T: Scalar> {
    pub matrix: DMatrix<T>,
    pub alpha: T,
    pub satisfied: bool,
}

impl<T: Scalar> DampingReport<T> {
    pub fn from_parts(r: &DMatrix<T>, g_star: &DMatrix<T>, kp: &DMatrix<T>) -> Result<Self> {
        let (n, m) = g_star.shape();
        if !linalg::is_square(r, n) || !linalg::is_square(kp, m) {
            return Err(Error::Dimension(
                "damping matrix parts disagree on dimensions".into(),
            ));
        }
        let p = r + g_star * kp * g_star.transpose();
        let matrix = (&p + p.transpose()) * T::lit(0.5);
        let alpha = linalg::min_sym_eigenvalue(&matrix);
        Ok(Self {
            satisfied: alpha > T::zero(),
            matrix,
            alpha,
        })
    }
}

/// Damping-injection condition for the given gains.
pub fn damping_injection<T: Scalar>(
    model: &BilinearPHModel<T>,
    eq: &EquilibriumSpec<T>,
    gains: &PidGains<T>,
) -> Result<DampingReport<T>> {
    damping_injection_kp(model, eq, &gains.kp)
}

/// As [`damping_injection`] with a bare (possibly singular) `K_P`.
pub fn damping_injection_kp<T: Scalar>(
    model: &BilinearPHModel<T>,
    eq: &EquilibriumSpec<T>,
    kp: &DMatrix<T>,
) -> Result<DampingReport<T>> {
    if eq.g_star.shape() != (model.n(), model.m()) {
        return Err(Error::Dimension(
            "equilibrium does not belong to this model".into(),
        ));
    }
    DampingReport::from_parts(model.r(), &eq.g_star, kp)
}

/// Outcome of one identity check over a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport<T: Scalar> {
    pub name: &'static str,
    pub max_violation: T,
    pub worst_step: Option<usize>,
    pub first_violation: Option<usize>,
    pub passed: bool,
    pub tolerance: T,
    pub steps_checked: usize,
}

struct Accumulator<T: Scalar> {
    name: &'static str,
    tol: T,
    max: T,
    worst: Option<usize>,
    first: Option<usize>,
    count: usize,
}

impl<T: Scalar> Accumulator<T> {
    fn new(name: &'static str, tol: T) -> Self {
        Self {
            name,
            tol,
            max: T::zero(),
            worst: None,
            first: None,
            count: 0,
        }
    }

    fn add(&mut self, k: usize, violation: T) {
        self.count += 1;
        // NaN counts as a violation.
        let v = if violation.is_finite() {
            violation
        } else {
            T::max_value().unwrap_or_else(|| T::lit(f64::MAX))
        };
        if self.worst.is_none() || v > self.max {
            self.max = v;
            self.worst = Some(k);
        }
        if self.first.is_none() && !(v <= self.tol) {
            self.first = Some(k);
        }
    }

    fn finish(self) -> CheckReport<T> {
        CheckReport {
            name: self.name,
            passed: self.max <= self.tol,
            max_violation: self.max,
            worst_step: self.worst,
            first_violation: self.first,
            tolerance: self.tol,
            steps_checked: self.count,
        }
    }
}

fn identity_violation<T: Scalar>(lhs: T, rhs: T) -> T {
    (lhs - rhs).mag() / rel_scale(lhs, rhs)
}

fn excess<T: Scalar>(value: T, bound: T, lhs: T, rhs: T) -> T {
    ((value - bound) / rel_scale(lhs, rhs)).max(T::zero())
}

/// Controller data available for a step.
#[derive(Debug, Clone, PartialEq)]
pub enum ControllerView<T: Scalar> {
    /// Integrator states before and after the step.
    Integrator { xi: DVector<T>, xi_next: DVector<T> },
    /// Only the logged energies are known (see [`LoggedEnergy`]).
    Logged,
}

/// Energies as written by the simulator, relative to the step's equilibrium.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoggedEnergy<T: Scalar> {
    pub h: T,
    pub hc: T,
    pub v: T,
    pub dv: T,
}

/// One step `k -> k+1` of a closed-loop trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct StepView<T: Scalar> {
    pub k: usize,
    pub x: DVector<T>,
    pub x_next: DVector<T>,
    /// Midpoint state, when the loop defines one.
    pub z: Option<DVector<T>>,
    pub u: DVector<T>,
    /// Output fed to the controller.
    pub y: DVector<T>,
    pub controller: ControllerView<T>,
    pub logged: Option<LoggedEnergy<T>>,
}

impl<T: Scalar> StepView<T> {
    pub fn from_record(r: &StepRecord<T>) -> Self {
        Self {
            k: r.k,
            x: r.x.clone(),
            x_next: r.x_next.clone(),
            z: r.z.clone(),
            u: r.u.clone(),
            y: r.y.clone(),
            controller: ControllerView::Integrator {
                xi: r.xi.clone(),
                xi_next: r.xi_next.clone(),
            },
            logged: Some(LoggedEnergy {
                h: r.h,
                hc: r.hc,
                v: r.v,
                dv: r.dv,
            }),
        }
    }

    fn chord_mid(&self) -> DVector<T> {
        (&self.x + &self.x_next) * T::lit(0.5)
    }
}

/// Views of all recorded steps of a trajectory.
pub fn trajectory_steps<T: Scalar>(traj: &Trajectory<T>) -> Vec<StepView<T>> {
    traj.records.iter().map(StepView::from_record).collect()
}

fn check_view<T: Scalar>(s: &StepView<T>, model: &BilinearPHModel<T>) -> Result<()> {
    check_len(&s.x, model.n(), "state")?;
    check_len(&s.x_next, model.n(), "next state")?;
    check_len(&s.u, model.m(), "input")?;
    check_len(&s.y, model.m(), "output")?;
    if let Some(z) = &s.z {
        check_len(z, model.n(), "midpoint")?;
    }
    Ok(())
}

fn segment<T: Scalar>(segments: &[ReferenceSegment<T>], k: usize) -> Result<&ReferenceSegment<T>> {
    if segments.is_empty() {
        return Err(Error::InvalidParameter(
            "no reference segments given".into(),
        ));
    }
    Ok(&segments[segment_index(segments, k)])
}

/// `(1/delta) dH` of one step, via `dx' Q (x_mid - x*)`.
fn plant_rate<T: Scalar>(
    model: &BilinearPHModel<T>,
    s: &StepView<T>,
    eq: &EquilibriumSpec<T>,
    delta: T,
) -> T {
    let dx = &s.x_next - &s.x;
    let mid = s.chord_mid() - &eq.x_star;
    dx.dot(&(model.q() * mid)) / delta
}

/// `(1/delta) dHc` of one step.
fn controller_rate<T: Scalar>(
    model: &BilinearPHModel<T>,
    gains: &PidGains<T>,
    s: &StepView<T>,
    seg: &ReferenceSegment<T>,
    delta: T,
) -> Result<T> {
    let eq = &seg.eq;
    match &s.controller {
        ControllerView::Integrator { xi, xi_next } => {
            check_len(xi, gains.m(), "integrator state")?;
            check_len(xi_next, gains.m(), "integrator state")?;
            let dxi = xi_next - xi;
            let xi_mid = (xi_next + xi) * T::lit(0.5) - &seg.xi_star;
            let cdx = &eq.c_mat * (&s.x_next - &s.x);
            let cmid = &eq.c_mat * (s.chord_mid() - &eq.x_star);
            Ok((dxi.dot(&(&gains.ki * xi_mid)) + cdx.dot(&(&gains.kd * cmid))) / delta)
        }
        ControllerView::Logged => {
            let l = s.logged.ok_or_else(|| {
                Error::InvalidParameter(
                    "step has neither integrator states nor logged energies".into(),
                )
            })?;
            // V(k+1) on the step's own equilibrium, minus the plant part.
            let hc_next = (l.v + l.dv) * delta - model.energy(&(&s.x_next - &eq.x_star));
            Ok((hc_next - l.hc) / delta)
        }
    }
}

/// Plant shifted-passivity identity and inequality of the midpoint
/// discretization: `(1/delta) dH = -z~' Q R Q z~ + y~' u~ <= y~' u~`.
pub fn check_plant_passivity<T: Scalar>(
    steps: &[StepView<T>],
    model: &BilinearPHModel<T>,
    segments: &[ReferenceSegment<T>],
    delta: T,
    tol: T,
) -> Result<CheckReport<T>> {
    let mut acc = Accumulator::new("plant-passivity", tol);
    for s in steps {
        check_view(s, model)?;
        let z = s
            .z
            .as_ref()
            .ok_or_else(|| Error::WrongMode("plant passivity needs the midpoint state z".into()))?;
        let eq = &segment(segments, s.k)?.eq;
        let lhs = plant_rate(model, s, eq, delta);
        let qz = model.q() * (z - &eq.x_star);
        let supply = (&s.y - &eq.y_star).dot(&(&s.u - &eq.u_star));
        let rhs = -qz.dot(&(model.r() * &qz)) + supply;
        acc.add(
            s.k,
            identity_violation(lhs, rhs).max(excess(lhs, supply, lhs, rhs)),
        );
    }
    Ok(acc.finish())
}

/// Controller passivity identity: `(1/delta) dHc = -y~' K_P y~ - y~' u~`.
pub fn check_controller_passivity<T: Scalar>(
    steps: &[StepView<T>],
    model: &BilinearPHModel<T>,
    gains: &PidGains<T>,
    segments: &[ReferenceSegment<T>],
    delta: T,
    tol: T,
) -> Result<CheckReport<T>> {
    let mut acc = Accumulator::new("controller-passivity", tol);
    for s in steps {
        check_view(s, model)?;
        let seg = segment(segments, s.k)?;
        let eq = &seg.eq;
        let lhs = controller_rate(model, gains, s, seg, delta)?;
        let yt = &s.y - &eq.y_star;
        let rhs = -yt.dot(&(&gains.kp * &yt)) - yt.dot(&(&s.u - &eq.u_star));
        acc.add(s.k, identity_violation(lhs, rhs));
    }
    Ok(acc.finish())
}

/// Closed-loop Lyapunov decrease:
/// `dV = -z~' Q [R + g* K_P g*'] Q z~` and `dV <= 0`.
///
/// Without a midpoint state the chord midpoint `(x_k + x_{k+1})/2` is used,
/// which lets the check act as a negative control on other discretizations.
pub fn check_lyapunov<T: Scalar>(
    steps: &[StepView<T>],
    model: &BilinearPHModel<T>,
    gains: &PidGains<T>,
    segments: &[ReferenceSegment<T>],
    delta: T,
    tol: T,
) -> Result<CheckReport<T>> {
    let mut acc = Accumulator::new("lyapunov", tol);
    let mut damping: Vec<Option<DMatrix<T>>> = vec![None; segments.len()];
    for s in steps {
        check_view(s, model)?;
        let idx = segment_index(segments, s.k);
        let seg = segment(segments, s.k)?;
        let eq = &seg.eq;
        let d = match &damping[idx] {
            Some(d) => d.clone(),
            None => {
                let d = damping_injection(model, eq, gains)?.matrix;
                damping[idx] = Some(d.clone());
                d
            }
        };
        let lhs = plant_rate(model, s, eq, delta) + controller_rate(model, gains, s, seg, delta)?;
        let z = s.z.clone().unwrap_or_else(|| s.chord_mid());
        let qz = model.q() * (z - &eq.x_star);
        let rhs = -qz.dot(&(d * &qz));
        acc.add(
            s.k,
            identity_violation(lhs, rhs).max(excess(lhs, T::zero(), lhs, rhs)),
        );
    }
    Ok(acc.finish())
}

/// Logged `H`, `Hc`, `V`, `dV` against recomputation.
pub fn check_energy_log<T: Scalar>(
    steps: &[StepView<T>],
    model: &BilinearPHModel<T>,
    gains: &PidGains<T>,
    segments: &[ReferenceSegment<T>],
    delta: T,
    tol: T,
) -> Result<CheckReport<T>> {
    let mut acc = Accumulator::new("energy-log", tol);
    for s in steps {
        check_view(s, model)?;
        let Some(l) = s.logged else { continue };
        let seg = segment(segments, s.k)?;
        let eq = &seg.eq;
        let h = model.energy(&(&s.x - &eq.x_star));
        let mut worst =
            identity_violation(l.h, h).max(identity_violation(l.v, (l.h + l.hc) / delta));
        if let ControllerView::Integrator { xi, .. } = &s.controller {
            let hc =
                crate::controller::storage(gains, &eq.c_mat, xi, &s.x, &seg.xi_star, &eq.x_star);
            worst = worst.max(identity_violation(l.hc, hc));
            let dv =
                plant_rate(model, s, eq, delta) + controller_rate(model, gains, s, seg, delta)?;
            worst = worst.max(identity_violation(l.dv, dv));
        }
        acc.add(s.k, worst);
    }
    Ok(acc.finish())
}

/// A check that either ran or was not applicable.
#[derive(Debug, Clone, PartialEq)]
pub enum CheckOutcome<T: Scalar> {
    Ran(CheckReport<T>),
    Skipped { name: &'static str, reason: String },
}

impl<T: Scalar> CheckOutcome<T> {
    pub fn name(&self) -> &'static str {
        match self {
            CheckOutcome::Ran(r) => r.name,
            CheckOutcome::Skipped { name, .. } => name,
        }
    }

    /// Skipped checks do not fail.
    pub fn passed(&self) -> bool {
        match self {
            CheckOutcome::Ran(r) => r.passed,
            CheckOutcome::Skipped { .. } => true,
        }
    }
}

/// All checks applicable to a trajectory of the given mode. The plant and
/// Lyapunov certificates are skipped outside `dt-midpoint`.
pub fn run_all_checks<T: Scalar>(
    steps: &[StepView<T>],
    mode: Mode,
    model: &BilinearPHModel<T>,
    gains: &PidGains<T>,
    segments: &[ReferenceSegment<T>],
    delta: T,
    tol: T,
) -> Result<Vec<CheckOutcome<T>>> {
    let midpoint_only = |name: &'static str| CheckOutcome::Skipped {
        name,
        reason: format!("not defined for {mode} trajectories"),
    };
    let mut out = Vec::with_capacity(4);
    if mode == Mode::DtMidpoint {
        out.push(CheckOutcome::Ran(check_plant_passivity(
            steps, model, segments, delta, tol,
        )?));
    } else {
        out.push(midpoint_only("plant-passivity"));
    }
    out.push(CheckOutcome::Ran(check_controller_passivity(
        steps, model, gains, segments, delta, tol,
    )?));
    if mode == Mode::DtMidpoint {
        out.push(CheckOutcome::Ran(check_lyapunov(
            steps, model, gains, segments, delta, tol,
        )?));
    } else {
        out.push(midpoint_only("lyapunov"));
    }
    out.push(CheckOutcome::Ran(check_energy_log(
        steps, model, gains, segments, delta, tol,
    )?));
    Ok(out)
}

/// Open-loop integrator whose convergence order is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    Midpoint,
    Euler,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderReport<T: Scalar> {
    pub deltas: Vec<T>,
    /// `|x_N - x_ref(T)|` per delta.
    pub errors: Vec<T>,
    /// Least-squares slope of `log err` against `log delta`; `None` when the
    /// errors are at rounding level and carry no order information.
    pub exponent: Option<T>,
}

/// Empirical convergence order of `method` on `[0, t_end]`.
///
/// The input `u(t)` is sampled at the grid instants and held over each
/// step; for every delta the reference is the fine 4th-order integration
/// of the same held input with `ref_substeps` substeps.
pub fn order_check<T, U>(
    model: &BilinearPHModel<T>,
    x0: &DVector<T>,
    u_of_t: U,
    deltas: &[T],
    t_end: T,
    method: Integrator,
    ref_substeps: usize,
) -> Result<OrderReport<T>>
where
    T: Scalar,
    U: Fn(T) -> DVector<T>,
{
    check_len(x0, model.n(), "initial state")?;
    if deltas.len() < 3 {
        return Err(Error::InvalidParameter(
            "order check needs at least three step sizes".into(),
        ));
    }
    if !(t_end > T::zero()) || ref_substeps == 0 {
        return Err(Error::InvalidParameter(
            "order check needs t_end > 0 and at least one reference substep".into(),
        ));
    }
    let ratio = deltas[1] / deltas[0];
    let geometric = deltas.iter().all(|d| *d > T::zero())
        && deltas
            .windows(2)
            .all(|w| (w[1] / w[0] - ratio).mag() <= T::lit(1e-9) * ratio.mag())
        && ratio != T::one();
    if !geometric {
        return Err(Error::InvalidParameter(
            "step sizes must form a geometric progression".into(),
        ));
    }

    let mut errors = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let n = (t_end / delta).round().as_f64() as usize;
        if n == 0 || (T::lit(n as f64) * delta - t_end).mag() > T::lit(1e-9) * t_end {
            return Err(Error::InvalidParameter(format!(
                "t_end is not a multiple of delta = {delta:e}"
            )));
        }
        let schedule: Vec<DVector<T>> = (0..n).map(|k| u_of_t(T::lit(k as f64) * delta)).collect();
        let reference =
            discretize::reference_trajectory(model, x0, &schedule, delta, ref_substeps)?;
        let mut x = x0.clone();
        for u in &schedule {
            x = match method {
                Integrator::Midpoint => discretize::midpoint_step_explicit(model, &x, u, delta)?,
                Integrator::Euler => discretize::euler_step(model, &x, u, delta)?,
            };
        }
        errors.push((x - &reference[n]).norm());
    }

    let floor = T::lit(1e3) * T::eps() * (T::one() + x0.norm());
    let exponent = if errors.iter().all(|e| *e <= floor) || errors.iter().any(|e| !(*e > T::zero()))
    {
        None
    } else {
        let pts: Vec<(f64, f64)> = deltas
            .iter()
            .zip(&errors)
            .map(|(d, e)| (d.as_f64().ln(), e.as_f64().ln()))
            .collect();
        Some(T::lit(ls_slope(&pts)))
    };
    Ok(OrderReport {
        deltas: deltas.to_vec(),
        errors,
        exponent,
    })
}

fn ls_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run_scenario, Scenario};
    use crate::model::{self, BuckBoostParams};

    #[test]
    fn slope_of_exact_power_law() {
        let pts: Vec<(f64, f64)> = [1e-3, 5e-4, 2.5e-4]
            .iter()
            .map(|d: &f64| (d.ln(), (3.0 * d * d).ln()))
            .collect();
        assert!((ls_slope(&pts) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn damping_at_zero_gain_is_not_satisfied() {
        let p = BuckBoostParams::nominal();
        let m = model::buck_boost_model(&p).unwrap();
        let eq = model::buck_boost_reference(&p, 35.0).unwrap();
        let r = damping_injection_kp(&m, &eq, &DMatrix::zeros(1, 1)).unwrap();
        assert!(!r.satisfied);
        assert_eq!(r.alpha, 0.0);
        let r = damping_injection_kp(&m, &eq, &DMatrix::from_element(1, 1, 0.1)).unwrap();
        assert!(r.satisfied && r.alpha > 0.0);
    }

    #[test]
    fn accumulator_tracks_first_and_worst() {
        let mut a = Accumulator::new("t", 1e-8);
        a.add(3, 1e-10);
        a.add(4, 1e-6);
        a.add(5, 1e-4);
        a.add(6, f64::NAN);
        let r = a.finish();
        assert_eq!(r.first_violation, Some(4));
        assert_eq!(r.worst_step, Some(6));
        assert!(!r.passed);
        assert_eq!(r.steps_checked, 4);
    }

    #[test]
    fn empty_segments_rejected() {
        let p = BuckBoostParams::nominal();
        let m = model::buck_boost_model(&p).unwrap();
        let s = Scenario::buck_boost(
            p,
            PidGains::scalar(0.1, 0.1, 6e-4).unwrap(),
            5e-3,
            0.02,
            35.0,
            Mode::DtMidpoint,
        );
        let tr = run_scenario(&s).unwrap();
        let steps = trajectory_steps(&tr);
        assert!(check_plant_passivity(&steps, &m, &[], 5e-3, 1e-8).is_err());
    }
}
