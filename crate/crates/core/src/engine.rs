//! Closed-loop simulation: converter model + PID-PBC.
//!
//! Three loop discretizations are provided:
//!
//! * `dt-midpoint`: midpoint plant and DT PID-PBC solved simultaneously.
//!   Substituting `xi+ = xi + delta y~` and `x+ - x = 2 (z - x)` makes the
//!   input an affine function of the midpoint `z`, while `z` depends on the
//!   input through one linear solve; the step is a root of the resulting
//!   equation in `u`.
//! * `dt-euler`: forward Euler plant and controller, output sampled at `x_k`,
//!   derivative by backward difference.
//! * `emulation`: the sampled-data law drives a finely integrated plant
//!   through a zero-order hold.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::controller::{self, PidGains};
use crate::discretize::{self, StepperSettings};
use crate::error::{Error, Result};
use crate::linalg::{self, check_len};
use crate::model::{self, BilinearPHModel, BuckBoostParams, EquilibriumSpec};
use crate::scalar::Scalar;

/// Minimum reference-integrator refinement accepted in emulation mode.
pub const MIN_EMULATION_SUBSTEPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    DtMidpoint,
    DtEuler,
    Emulation,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::DtMidpoint, Mode::DtEuler, Mode::Emulation];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::DtMidpoint => "dt-midpoint",
            Mode::DtEuler => "dt-euler",
            Mode::Emulation => "emulation",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "unknown mode `{s}` (expected dt-midpoint, dt-euler or emulation)"
                ))
            })
    }
}

/// The converter being controlled.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Plant<T: Scalar> {
    BuckBoost(BuckBoostParams<T>),
    General(BilinearPHModel<T>),
}

impl<T: Scalar> Plant<T> {
    pub fn model(&self) -> Result<BilinearPHModel<T>> {
        match self {
            Plant::BuckBoost(p) => model::buck_boost_model(p),
            Plant::General(m) => Ok(m.clone()),
        }
    }

    pub fn equilibrium(&self, target: &Target<T>, tol: T) -> Result<EquilibriumSpec<T>> {
        match (self, target) {
            (Plant::BuckBoost(p), Target::Voltage(v)) => model::buck_boost_reference(p, *v),
            (Plant::BuckBoost(p), Target::State(x)) => {
                model::buck_boost_model(p)?.make_equilibrium(x, tol)
            }
            (Plant::General(m), Target::State(x)) => m.make_equilibrium(x, tol),
            (Plant::General(_), Target::Voltage(_)) => Err(Error::InvalidParameter(
                "voltage references need a buck-boost plant".into(),
            )),
        }
    }

    /// Regulated quantity: output voltage for the buck-boost, state norm otherwise.
    pub fn output(&self, x: &DVector<T>) -> T {
        match self {
            Plant::BuckBoost(p) => p.voltage(x),
            Plant::General(_) => x.norm(),
        }
    }

    /// Signed tracking error (V for the buck-boost, state distance otherwise).
    pub fn tracking_error(&self, x: &DVector<T>, eq: &EquilibriumSpec<T>) -> T {
        match self {
            Plant::BuckBoost(p) => p.voltage(x) - p.voltage(&eq.x_star),
            Plant::General(_) => (x - &eq.x_star).norm(),
        }
    }

    /// Half-width of the 1% settling band around the target.
    pub fn settling_band(&self, eq: &EquilibriumSpec<T>) -> T {
        let target = match self {
            Plant::BuckBoost(p) => p.voltage(&eq.x_star).mag(),
            Plant::General(_) => eq.x_star.norm(),
        };
        if target > T::zero() {
            target * T::lit(0.01)
        } else {
            T::lit(0.01)
        }
    }
}

/// Operating-point target: an output voltage (buck-boost) or an explicit state.
#[derive(Debug, Clone, PartialEq)]
pub enum Target<T: Scalar> {
    Voltage(T),
    State(DVector<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleEntry<T: Scalar> {
    /// Switching time (s); rounded to the nearest sample instant.
    pub time: T,
    pub target: Target<T>,
}

/// Non-stepper loop options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopSettings<T: Scalar> {
    pub stepper: StepperSettings<T>,
    /// `|x|` above which the sampled-data loops are declared diverged.
    pub blow_up: T,
    /// Clamp the duty ratio to `[0, 1]`. Off by default: the passivity and
    /// Lyapunov certificates assume an unconstrained input.
    pub clamp_u: bool,
}

impl<T: Scalar> LoopSettings<T> {
    pub fn new(stepper: StepperSettings<T>) -> Self {
        Self {
            stepper,
            blow_up: T::lit(1e6),
            clamp_u: false,
        }
    }
}

/// Everything needed to run one closed-loop simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario<T: Scalar> {
    pub plant: Plant<T>,
    pub gains: PidGains<T>,
    pub t_final: T,
    pub x0: DVector<T>,
    pub xi0: DVector<T>,
    /// Nondecreasing times, first entry at `t = 0`.
    pub schedule: Vec<ScheduleEntry<T>>,
    pub mode: Mode,
    pub settings: LoopSettings<T>,
    pub record_every: usize,
    /// Relative assignability tolerance for explicit state targets.
    pub assign_tol: T,
}

impl<T: Scalar> Scenario<T> {
    /// Buck-boost scenario starting from rest with a constant voltage reference.
    pub fn buck_boost(
        params: BuckBoostParams<T>,
        gains: PidGains<T>,
        delta: T,
        t_final: T,
        v_star: T,
        mode: Mode,
    ) -> Self {
        let m = gains.m();
        Self {
            plant: Plant::BuckBoost(params),
            gains,
            t_final,
            x0: DVector::zeros(2),
            xi0: DVector::zeros(m),
            schedule: vec![ScheduleEntry {
                time: T::zero(),
                target: Target::Voltage(v_star),
            }],
            mode,
            settings: LoopSettings::new(StepperSettings::with_delta(delta)),
            record_every: 1,
            assign_tol: model::default_assignability_tol(),
        }
    }

    pub fn delta(&self) -> T {
        self.settings.stepper.delta
    }

    /// Number of sampling intervals in the horizon (at least one).
    pub fn steps(&self) -> usize {
        let n = (self.t_final / self.delta()).round().as_f64();
        if n.is_finite() && n >= 1.0 {
            n as usize
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.settings.stepper.validate()?;
        if !(self.t_final > T::zero()) || !self.t_final.is_finite() {
            return Err(Error::InvalidParameter("t_final must be positive".into()));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidParameter(
                "record_every must be at least 1".into(),
            ));
        }
        if !(self.settings.blow_up > T::zero()) {
            return Err(Error::InvalidParameter(
                "blow-up bound must be positive".into(),
            ));
        }
        let first = self
            .schedule
            .first()
            .ok_or_else(|| Error::InvalidParameter("reference schedule is empty".into()))?;
        if first.time != T::zero() {
            return Err(Error::InvalidParameter(
                "first schedule entry must be at t = 0".into(),
            ));
        }
        for w in self.schedule.windows(2) {
            if w[1].time < w[0].time {
                return Err(Error::InvalidParameter(
                    "schedule times must be nondecreasing".into(),
                ));
            }
        }
        if let Some(last) = self.schedule.last() {
            if last.time > self.t_final {
                return Err(Error::InvalidParameter(
                    "schedule times must lie within [0, t_final]".into(),
                ));
            }
        }
        if self.mode == Mode::Emulation && self.settings.stepper.substeps < MIN_EMULATION_SUBSTEPS {
            return Err(Error::InvalidParameter(format!(
                "emulation mode needs at least {MIN_EMULATION_SUBSTEPS} substeps"
            )));
        }
        let model = self.plant.model()?;
        check_len(&self.x0, model.n(), "initial state")?;
        check_len(&self.xi0, model.m(), "initial integrator state")?;
        if self.gains.m() != model.m() {
            return Err(Error::Dimension(format!(
                "gains are {0}x{0}, model has {1} inputs",
                self.gains.m(),
                model.m()
            )));
        }
        Ok(())
    }

    /// Equilibria of the schedule, with the step index at which each takes effect.
    pub fn segments(&self) -> Result<Vec<ReferenceSegment<T>>> {
        let delta = self.delta();
        self.schedule
            .iter()
            .map(|e| {
                let eq = self.plant.equilibrium(&e.target, self.assign_tol)?;
                let xi_star = controller::xi_star(&self.gains, &eq)?;
                let start_step = (e.time / delta).round().as_f64().max(0.0) as usize;
                Ok(ReferenceSegment {
                    start_step,
                    eq,
                    xi_star,
                })
            })
            .collect()
    }
}

/// A constant-reference stretch of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSegment<T: Scalar> {
    pub start_step: usize,
    pub eq: EquilibriumSpec<T>,
    pub xi_star: DVector<T>,
}

/// Index of the segment active at step `k`.
pub fn segment_index<T: Scalar>(segments: &[ReferenceSegment<T>], k: usize) -> usize {
    segments
        .iter()
        .rposition(|s| s.start_step <= k)
        .unwrap_or(0)
}

/// Loop state at sample `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopState<T: Scalar> {
    pub k: usize,
    pub x: DVector<T>,
    pub xi: DVector<T>,
    /// Previous plant sample, for the backward-difference derivative.
    pub x_prev: DVector<T>,
}

impl<T: Scalar> LoopState<T> {
    pub fn new(x0: DVector<T>, xi0: DVector<T>) -> Self {
        Self {
            k: 0,
            x_prev: x0.clone(),
            x: x0,
            xi: xi0,
        }
    }
}

/// One step of a closed-loop run. Energies refer to the step's equilibrium:
/// `h = H(x~_k)`, `hc = Hc(xi~_k, x~_k)`, `v = (h + hc) / delta` and
/// `dv = V(k+1) - V(k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord<T: Scalar> {
    pub k: usize,
    pub t: T,
    pub segment: usize,
    pub x: DVector<T>,
    pub x_next: DVector<T>,
    /// Midpoint state; only the `dt-midpoint` loop defines it.
    pub z: Option<DVector<T>>,
    pub xi: DVector<T>,
    pub xi_next: DVector<T>,
    pub u: DVector<T>,
    /// Passive output fed to the controller (`C z` or `C x`).
    pub y: DVector<T>,
    pub h: T,
    pub hc: T,
    pub v: T,
    pub dv: T,
    pub newton_iters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T: Scalar> {
    pub state: LoopState<T>,
    pub record: StepRecord<T>,
    pub diverged: bool,
}

struct Energies<T: Scalar> {
    h: T,
    hc: T,
    v: T,
    dv: T,
}

fn energies<T: Scalar>(
    model: &BilinearPHModel<T>,
    gains: &PidGains<T>,
    eq: &EquilibriumSpec<T>,
    xi_star: &DVector<T>,
    delta: T,
    (x, xi): (&DVector<T>, &DVector<T>),
    (x1, xi1): (&DVector<T>, &DVector<T>),
) -> Energies<T> {
    let h = model.energy(&(x - &eq.x_star));
    let hc = controller::storage(gains, &eq.c_mat, xi, x, xi_star, &eq.x_star);
    let h1 = model.energy(&(x1 - &eq.x_star));
    let hc1 = controller::storage(gains, &eq.c_mat, xi1, x1, xi_star, &eq.x_star);
    let v = (h + hc) / delta;
    Energies {
        h,
        hc,
        v,
        dv: (h1 + hc1) / delta - v,
    }
}

fn clamp_input<T: Scalar>(u: &DVector<T>) -> DVector<T> {
    u.map(|v| v.max(T::zero()).min(T::one()))
}

fn is_diverged<T: Scalar>(x: &DVector<T>, bound: T) -> bool {
    !linalg::all_finite_vec(x) || x.norm() > bound
}

fn check_loop_inputs<T: Scalar>(
    model: &BilinearPHModel<T>,
    gains: &PidGains<T>,
    eq: &EquilibriumSpec<T>,
    state: &LoopState<T>,
) -> Result<()> {
    check_len(&state.x, model.n(), "state")?;
    check_len(&state.x_prev, model.n(), "previous state")?;
    check_len(&state.xi, gains.m(), "integrator state")?;
    check_len(&eq.x_star, model.n(), "equilibrium state")?;
    if gains.m() != model.m() || eq.c_mat.shape() != (model.m(), model.n()) {
        return Err(Error::Dimension(
            "gains, equilibrium and model disagree on dimensions".into(),
        ));
    }
    Ok(())
}

/// Affine controller map of the coupled DT step: `u(z) = a - B z`.
struct CoupledLaw<T: Scalar> {
    a: DVector<T>,
    b: DMatrix<T>,
}

impl<T: Scalar> CoupledLaw<T> {
    fn new(gains: &PidGains<T>, eq: &EquilibriumSpec<T>, state: &LoopState<T>, delta: T) -> Self {
        let c = &eq.c_mat;
        let kpi = &gains.kp + &gains.ki * (delta * T::lit(0.5));
        let kd2 = &gains.kd * (T::lit(2.0) / delta);
        let b = (&kpi + &kd2) * c;
        let a = &kpi * &eq.y_star - &gains.ki * &state.xi + kd2 * (c * &state.x);
        Self { a, b }
    }

    fn u(&self, z: &DVector<T>) -> DVector<T> {
        &self.a - &self.b * z
    }
}

/// Residual norms of the two defining relations of the coupled DT step at
/// `(z, u)`: the midpoint plant equation and the DT PID-PBC law (with
/// `y~ = C z - y*`, `dx = 2 (z - x)`).
pub fn coupled_residuals<T: Scalar>(
    model: &BilinearPHModel<T>,
    gains: &PidGains<T>,
    eq: &EquilibriumSpec<T>,
    state: &LoopState<T>,
    delta: T,
    z: &DVector<T>,
    u: &DVector<T>,
) -> Result<(T, T)> {
    check_loop_inputs(model, gains, eq, state)?;
    check_len(z, model.n(), "midpoint")?;
    check_len(u, model.m(), "input")?;
    let plant = (z - &state.x - model.field(z, u) * (delta * T::lit(0.5))).norm();
    let dx = (z - &state.x) * T::lit(2.0);
    let (u_law, _) =
        controller::dt_law(gains, &eq.c_mat, &state.xi, &eq.output_error(z), &dx, delta);
    Ok((plant, (u - u_law).norm()))
}

struct CoupledSolution<T: Scalar> {
    u: DVector<T>,
    z: DVector<T>,
    iters: usize,
}

/// Midpoint of the plant under a held input: `z = x + (delta/2) F(z, u)`,
/// solved exactly as `[I - (delta/2) N(u) Q] z = x + (delta/2) M(u) E`.
/// Also returns `dz/du`.
fn midpoint_of<T: Scalar>(
    model: &BilinearPHModel<T>,
    x: &DVector<T>,
    u: &DVector<T>,
    half: T,
) -> Result<(DVector<T>, DMatrix<T>)> {
    let (n, mm) = discretize::nm(model, u);
    let a = DMatrix::identity(model.n(), model.n()) - n * model.q() * half;
    let lu = a.clone().lu();
    let z = lu
        .solve(&(x + mm * model.e() * half))
        .filter(|z| linalg::all_finite_vec(z))
        .ok_or_else(|| Error::SingularStepMatrix {
            condition: linalg::inverse_with_condition(&a)
                .err()
                .unwrap_or(T::zero())
                .as_f64(),
        })?;
    let dz = lu
        .solve(&(model.input_matrix(&z) * half))
        .expect("factorization succeeded above");
    Ok((z, dz))
}

/// Solves the coupled DT step in the input: `phi(u) = u - a + B z(u) = 0`.
///
/// Single-input models use a bracketed Newton iteration (bisection
/// whenever a Newton step leaves the bracket or stalls); multi-input
/// models use damped Newton. The returned `z` is the exact plant midpoint
/// for the returned `u`.
fn solve_coupled<T: Scalar>(
    model: &BilinearPHModel<T>,
    law: &CoupledLaw<T>,
    x: &DVector<T>,
    settings: &StepperSettings<T>,
) -> Result<CoupledSolution<T>> {
    let half = settings.delta * T::lit(0.5);
    let seed = law.u(x);
    if model.m() == 1 {
        return solve_coupled_scalar(model, law, x, seed[0], half, settings);
    }
    let id = DMatrix::<T>::identity(model.m(), model.m());
    let nan = || DVector::from_element(model.m(), T::lit(f64::NAN));
    let sol = discretize::damped_newton(
        |u| match midpoint_of(model, x, u, half) {
            Ok((z, _)) => u - law.u(&z),
            Err(_) => nan(),
        },
        |u| match midpoint_of(model, x, u, half) {
            Ok((_, dz)) => &id + &law.b * dz,
            Err(_) => DMatrix::from_element(model.m(), model.m(), T::lit(f64::NAN)),
        },
        seed.clone(),
        settings.newton_tol * (T::one() + seed.norm()),
        settings.newton_max_iter,
    )?;
    let (z, _) = midpoint_of(model, x, &sol.z, half)?;
    Ok(CoupledSolution {
        u: sol.z,
        z,
        iters: sol.iters,
    })
}

fn solve_coupled_scalar<T: Scalar>(
    model: &BilinearPHModel<T>,
    law: &CoupledLaw<T>,
    x: &DVector<T>,
    seed: T,
    half: T,
    settings: &StepperSettings<T>,
) -> Result<CoupledSolution<T>> {
    let eval = |u: T| -> Result<(T, T, DVector<T>)> {
        let uv = DVector::from_element(1, u);
        let (z, dz) = midpoint_of(model, x, &uv, half)?;
        let phi = u - law.u(&z)[0];
        let dphi = T::one() + (&law.b * dz)[(0, 0)];
        Ok((phi, dphi, z))
    };
    let tol = |u: T| settings.newton_tol * (T::one() + u.mag());
    let done = |u: T, z: DVector<T>, iters| {
        Ok(CoupledSolution {
            u: DVector::from_element(1, u),
            z,
            iters,
        })
    };

    let (mut u, (mut phi, mut dphi, mut z)) = (seed, eval(seed)?);
    let mut iters = 0;
    if phi.mag() <= tol(u) && phi == T::zero() {
        return done(u, z, 0);
    }

    // Newton from the seed while it makes progress; most steps end here.
    while iters < settings.newton_max_iter && phi.mag() > tol(u) {
        let step = -phi / dphi;
        let cand = u + step;
        if !cand.is_finite() {
            break;
        }
        let (p, d, zc) = eval(cand)?;
        if !(p.mag() < phi.mag()) {
            break;
        }
        iters += 1;
        (u, phi, dphi, z) = (cand, p, d, zc);
    }
    if phi.mag() <= tol(u) {
        // One polishing step, kept only if it helps.
        let cand = u - phi / dphi;
        if cand.is_finite() {
            let (p, _, zc) = eval(cand)?;
            if p.mag() < phi.mag() {
                return done(cand, zc, iters + 1);
            }
        }
        return done(u, z, iters);
    }

    // Bracket a sign change: phi ~ u for large |u| when z(u) stays bounded.
    let limit = T::lit(1e15) * (T::one() + seed.mag());
    let dir = if phi > T::zero() { -T::one() } else { T::one() };
    let mut width = T::one().max(u.mag());
    let (mut lo, mut hi) = (u, u);
    let far = loop {
        let cand = u + dir * width;
        let (p, _, _) = eval(cand)?;
        iters += 1;
        if p * phi <= T::zero() {
            break cand;
        }
        width *= T::lit(4.0);
        if width > limit || iters > settings.newton_max_iter + 64 {
            return Err(Error::NoConvergence {
                iters,
                residual: phi.as_f64(),
            });
        }
    };
    if far < u {
        lo = far;
    } else {
        hi = far;
    }
    // Orient so that phi(lo) < 0 < phi(hi).
    let (p_lo, _, _) = eval(lo)?;
    if p_lo > T::zero() {
        std::mem::swap(&mut lo, &mut hi);
    }

    let max_total = settings.newton_max_iter + 256;
    let mut prev_step = (hi - lo).mag();
    while iters < max_total {
        if phi.mag() <= tol(u) {
            return done(u, z, iters);
        }
        let (a, b) = if lo < hi { (lo, hi) } else { (hi, lo) };
        if b - a <= T::lit(4.0) * T::eps() * (T::one() + u.mag()) {
            // Root located to rounding; steep phi can keep |phi| above tol.
            return done(u, z, iters);
        }
        let newton = u - phi / dphi;
        let use_newton = newton.is_finite()
            && newton > a
            && newton < b
            && (newton - u).mag() < T::lit(0.5) * prev_step;
        let cand = if use_newton {
            newton
        } else {
            (a + b) * T::lit(0.5)
        };
        prev_step = (cand - u).mag();
        let (p, d, zc) = eval(cand)?;
        iters += 1;
        if p < T::zero() {
            lo = cand;
        } else {
            hi = cand;
        }
        (u, phi, dphi, z) = (cand, p, d, zc);
    }
    Err(Error::NoConvergence {
        iters,
        residual: phi.as_f64(),
    })
}

/// Exact DT-DT closed-loop step (midpoint plant + DT PID-PBC).
pub fn closed_loop_step_dt<T: Scalar>(
    model: &BilinearPHModel<T>,
    gains: &PidGains<T>,
    eq: &EquilibriumSpec<T>,
    state: &LoopState<T>,
    settings: &LoopSettings<T>,
) -> Result<StepOutput<T>> {
    settings.stepper.validate()?;
    check_loop_inputs(model, gains, eq, state)?;
    let xi_star = controller::xi_star(gains, eq)?;
    dt_step(model, gains, eq, &xi_star, state, settings, 0)
}

fn dt_step<T: Scalar>(
    model: &BilinearPHModel<T>,
    gains: &PidGains<T>,
    eq: &EquilibriumSpec<T>,
    xi_star: &DVector<T>,
    state: &LoopState<T>,
    settings: &LoopSettings<T>,
    segment: usize,
) -> Result<StepOutput<T>> {
    let delta = settings.stepper.delta;
    let x = &state.x;
    let law = CoupledLaw::new(gains, eq, state, delta);
    let sol = solve_coupled(model, &law, x, &settings.stepper)?;
    let iters = sol.iters;
    let mut z = sol.z;
    let mut u = sol.u;
    let mut x_next = &z * T::lit(2.0) - x;
    if settings.clamp_u {
        let uc = clamp_input(&u);
        if uc != u {
            x_next = discretize::midpoint_step_explicit(model, x, &uc, delta)?;
            z = (x + &x_next) * T::lit(0.5);
            u = uc;
        }
    }
    let y = eq.output(&z);
    let xi_next = &state.xi + (&y - &eq.y_star) * delta;
    let en = energies(
        model,
        gains,
        eq,
        xi_star,
        delta,
        (x, &state.xi),
        (&x_next, &xi_next),
    );
    let diverged = is_diverged(&x_next, settings.blow_up);
    let record = StepRecord {
        k: state.k,
        t: T::lit(state.k as f64) * delta,
        segment,
        x: x.clone(),
        x_next: x_next.clone(),
        z: Some(z),
        xi: state.xi.clone(),
        xi_next: xi_next.clone(),
        u,
        y,
        h: en.h,
        hc: en.hc,
        v: en.v,
        dv: en.dv,
        newton_iters: iters,
    };
    let next = LoopState {
        k: state.k + 1,
        x: x_next,
        xi: xi_next,
        x_prev: x.clone(),
    };
    Ok(StepOutput {
        state: next,
        record,
        diverged,
    })
}

/// Euler-everywhere closed-loop step.
pub fn closed_loop_step_euler<T: Scalar>(
    model: &BilinearPHModel<T>,
    gains: &PidGains<T>,
    eq: &EquilibriumSpec<T>,
    state: &LoopState<T>,
    settings: &LoopSettings<T>,
) -> Result<StepOutput<T>> {
    settings.stepper.validate()?;
    check_loop_inputs(model, gains, eq, state)?;
    let xi_star = controller::xi_star(gains, eq)?;
    Ok(sampled_step(
        model, gains, eq, &xi_star, state, settings, None, 0,
    ))
}

/// Sampled-data step: the DT law acts on `x(t_k)` and a zero-order hold
/// drives the finely integrated plant over `[t_k, t_k + delta]`.
pub fn closed_loop_step_emulation<T: Scalar>(
    model: &BilinearPHModel<T>,
    gains: &PidGains<T>,
    eq: &EquilibriumSpec<T>,
    state: &LoopState<T>,
    settings: &LoopSettings<T>,
) -> Result<StepOutput<T>> {
    settings.stepper.validate()?;
    check_loop_inputs(model, gains, eq, state)?;
    let substeps = settings.stepper.substeps;
    if substeps < MIN_EMULATION_SUBSTEPS {
        return Err(Error::InvalidParameter(format!(
            "emulation mode needs at least {MIN_EMULATION_SUBSTEPS} substeps"
        )));
    }
    let xi_star = controller::xi_star(gains, eq)?;
    Ok(sampled_step(
        model,
        gains,
        eq,
        &xi_star,
        state,
        settings,
        Some(substeps),
        0,
    ))
}

#[allow(clippy::too_many_arguments)]
fn sampled_step<T: Scalar>(
    model: &BilinearPHModel<T>,
    gains: &PidGains<T>,
    eq: &EquilibriumSpec<T>,
    xi_star: &DVector<T>,
    state: &LoopState<T>,
    settings: &LoopSettings<T>,
    substeps: Option<usize>,
    segment: usize,
) -> StepOutput<T> {
    let delta = settings.stepper.delta;
    let x = &state.x;
    let y = eq.output(x);
    let (mut u, xi_next) = controller::dt_law(
        gains,
        &eq.c_mat,
        &state.xi,
        &(&y - &eq.y_star),
        &(x - &state.x_prev),
        delta,
    );
    if settings.clamp_u {
        u = clamp_input(&u);
    }
    let x_next = match substeps {
        None => x + model.field(x, &u) * delta,
        Some(n) => discretize::rk4_hold(model, x, &u, delta, n).expect("inputs checked by caller"),
    };
    let en = energies(
        model,
        gains,
        eq,
        xi_star,
        delta,
        (x, &state.xi),
        (&x_next, &xi_next),
    );
    let diverged = is_diverged(&x_next, settings.blow_up);
    let record = StepRecord {
        k: state.k,
        t: T::lit(state.k as f64) * delta,
        segment,
        x: x.clone(),
        x_next: x_next.clone(),
        z: None,
        xi: state.xi.clone(),
        xi_next: xi_next.clone(),
        u,
        y,
        h: en.h,
        hc: en.hc,
        v: en.v,
        dv: en.dv,
        newton_iters: 0,
    };
    let next = LoopState {
        k: state.k + 1,
        x: x_next,
        xi: xi_next,
        x_prev: x.clone(),
    };
    StepOutput {
        state: next,
        record,
        diverged,
    }
}

/// End-of-run figures. Tracking quantities refer to the last reference segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary<T: Scalar> {
    pub steps: usize,
    pub final_time: T,
    /// Output voltage (buck-boost) or state norm at the end of the run.
    pub final_output: T,
    pub target_output: T,
    /// `|output - target|` relative to the target (absolute when it is zero).
    pub final_tracking_error: T,
    /// Time from the start of the last segment until the response enters
    /// the 1% band for good (`None` if it never does).
    pub settling_time: Option<T>,
    /// Largest absolute tracking error over the last segment.
    pub peak_tracking_error: T,
    pub max_abs_u: T,
    pub min_dv: T,
    pub max_dv: T,
    pub diverged: bool,
    /// `|z - x*| / |x*|` at the last step (midpoint loop only).
    pub final_z_error: Option<T>,
    /// `|x - x*| / |x*|` at the end of the run.
    pub final_x_error: T,
    pub max_newton_iters: usize,
}

/// A finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T: Scalar> {
    pub mode: Mode,
    pub delta: T,
    pub record_every: usize,
    pub segments: Vec<ReferenceSegment<T>>,
    pub records: Vec<StepRecord<T>>,
    pub final_state: LoopState<T>,
    pub summary: Summary<T>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn segment_for(&self, k: usize) -> &ReferenceSegment<T> {
        &self.segments[segment_index(&self.segments, k)]
    }
}

fn relative<T: Scalar>(err: T, scale: T) -> T {
    if scale > T::zero() {
        err / scale
    } else {
        err
    }
}

struct Tracker<T: Scalar> {
    seg_start: T,
    band: T,
    // (time, |error|) over the current segment.
    samples: Vec<(T, T)>,
    peak: T,
}

impl<T: Scalar> Tracker<T> {
    fn new(t: T, band: T, err: T) -> Self {
        Self {
            seg_start: t,
            band,
            samples: vec![(t, err.mag())],
            peak: err.mag(),
        }
    }

    fn push(&mut self, t: T, err: T) {
        self.peak = self.peak.max(err.mag());
        self.samples.push((t, err.mag()));
    }

    fn settling_time(&self) -> Option<T> {
        match self.samples.iter().rposition(|(_, e)| !(*e <= self.band)) {
            None => Some(T::zero()),
            Some(i) if i + 1 < self.samples.len() => Some(self.samples[i + 1].0 - self.seg_start),
            Some(_) => None,
        }
    }
}

/// Runs a scenario from `(x0, xi0)` over its horizon.
pub fn run_scenario<T: Scalar>(scenario: &Scenario<T>) -> Result<Trajectory<T>> {
    scenario.validate()?;
    let started = Instant::now();
    let model = scenario.plant.model()?;
    let segments = scenario.segments()?;
    let gains = &scenario.gains;
    let settings = &scenario.settings;
    let delta = scenario.delta();
    let n_steps = scenario.steps();
    if settings.clamp_u {
        log::warn!(
            "duty-ratio clamping is active; passivity and Lyapunov certificates do not apply"
        );
    }

    let mut state = LoopState::new(scenario.x0.clone(), scenario.xi0.clone());
    let mut records = Vec::with_capacity(n_steps / scenario.record_every + 1);
    let mut seg = segment_index(&segments, 0);
    let plant = &scenario.plant;
    let mut tracker = Tracker::new(
        T::zero(),
        plant.settling_band(&segments[seg].eq),
        plant.tracking_error(&state.x, &segments[seg].eq),
    );
    let mut max_abs_u = T::zero();
    let mut min_dv = T::max_value().unwrap_or_else(|| T::lit(f64::MAX));
    let mut max_dv = -min_dv;
    let mut max_iters = 0;
    let mut diverged = false;
    let mut last_z = None;

    for k in 0..n_steps {
        let s = segment_index(&segments, k);
        if s != seg {
            seg = s;
            let eq = &segments[seg].eq;
            let t = T::lit(k as f64) * delta;
            tracker = Tracker::new(
                t,
                plant.settling_band(eq),
                plant.tracking_error(&state.x, eq),
            );
        }
        let segment = &segments[seg];
        let out = match scenario.mode {
            Mode::DtMidpoint => dt_step(
                &model,
                gains,
                &segment.eq,
                &segment.xi_star,
                &state,
                settings,
                seg,
            ),
            Mode::DtEuler => Ok(sampled_step(
                &model,
                gains,
                &segment.eq,
                &segment.xi_star,
                &state,
                settings,
                None,
                seg,
            )),
            Mode::Emulation => Ok(sampled_step(
                &model,
                gains,
                &segment.eq,
                &segment.xi_star,
                &state,
                settings,
                Some(settings.stepper.substeps),
                seg,
            )),
        }
        .map_err(|e| Error::Step {
            step: k,
            elapsed: started.elapsed(),
            source: Box::new(e),
        })?;

        let rec = &out.record;
        max_abs_u = max_abs_u.max(rec.u.amax());
        min_dv = min_dv.min(rec.dv);
        max_dv = max_dv.max(rec.dv);
        max_iters = max_iters.max(rec.newton_iters);
        last_z = rec.z.clone();
        tracker.push(
            T::lit((k + 1) as f64) * delta,
            plant.tracking_error(&out.state.x, &segment.eq),
        );

        let last = k + 1 == n_steps || out.diverged;
        if k % scenario.record_every == 0 || last {
            records.push(out.record);
        }
        state = out.state;
        if out.diverged {
            diverged = true;
            break;
        }
    }

    let eq = &segments[seg].eq;
    let target_output = plant.output(&eq.x_star);
    let final_output = plant.output(&state.x);
    let x_scale = eq.x_star.norm();
    let summary = Summary {
        steps: state.k,
        final_time: T::lit(state.k as f64) * delta,
        final_output,
        target_output,
        final_tracking_error: relative(
            plant.tracking_error(&state.x, eq).mag(),
            target_output.mag(),
        ),
        settling_time: if diverged {
            None
        } else {
            tracker.settling_time()
        },
        peak_tracking_error: tracker.peak,
        max_abs_u,
        min_dv,
        max_dv,
        diverged,
        final_z_error: last_z.map(|z| relative((z - &eq.x_star).norm(), x_scale)),
        final_x_error: relative((&state.x - &eq.x_star).norm(), x_scale),
        max_newton_iters: max_iters,
    };
    Ok(Trajectory {
        mode: scenario.mode,
        delta,
        record_every: scenario.record_every,
        segments,
        records,
        final_state: state,
        summary,
    })
}

/// Parameter varied by a sweep.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis<T: Scalar> {
    Delta(Vec<T>),
    Gains(Vec<PidGains<T>>),
    /// Replaces the target of the last schedule entry.
    Reference(Vec<Target<T>>),
}

impl<T: Scalar> SweepAxis<T> {
    pub fn len(&self) -> usize {
        match self {
            SweepAxis::Delta(v) => v.len(),
            SweepAxis::Gains(v) => v.len(),
            SweepAxis::Reference(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn apply(&self, template: &Scenario<T>, i: usize) -> (String, Scenario<T>) {
        let mut s = template.clone();
        let label = match self {
            SweepAxis::Delta(v) => {
                s.settings.stepper.delta = v[i];
                format!("{:e}", v[i])
            }
            SweepAxis::Gains(v) => {
                s.gains = v[i].clone();
                format!(
                    "{:e}:{:e}:{:e}",
                    v[i].kp[(0, 0)],
                    v[i].ki[(0, 0)],
                    v[i].kd[(0, 0)]
                )
            }
            SweepAxis::Reference(v) => {
                let label = match &v[i] {
                    Target::Voltage(x) => format!("{x:e}"),
                    Target::State(x) => format!("{:?}", x.as_slice()),
                };
                if let Some(last) = s.schedule.last_mut() {
                    last.target = v[i].clone();
                }
                label
            }
        };
        (label, s)
    }
}

/// Outcome of one sweep point; failures stay local to their point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun<T: Scalar> {
    pub label: String,
    pub outcome: Result<Summary<T>>,
}

/// Runs one independent scenario per axis value, in parallel, returning
/// results in input order.
pub fn sweep<T: Scalar>(template: &Scenario<T>, axis: &SweepAxis<T>) -> Result<Vec<SweepRun<T>>> {
    if axis.is_empty() {
        return Err(Error::InvalidParameter(
            "sweep needs at least one value".into(),
        ));
    }
    Ok((0..axis.len())
        .into_par_iter()
        .map(|i| {
            let (label, scenario) = axis.apply(template, i);
            SweepRun {
                label,
                outcome: run_scenario(&scenario).map(|t| t.summary),
            }
        })
        .collect())
}

/// Bracket around the smallest sampling time at which a mode diverges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceBracket<T: Scalar> {
    /// Largest probed delta that stayed bounded.
    pub stable: Option<T>,
    /// Smallest probed delta that diverged.
    pub diverging: Option<T>,
    pub runs: usize,
}

/// Bisection on the sampling time over `[lo, hi]` for the onset of
/// divergence of `template` (its mode and gains are used as given). Solver
/// failures count as divergence.
pub fn bisect_divergence<T: Scalar>(
    template: &Scenario<T>,
    lo: T,
    hi: T,
    iterations: usize,
) -> Result<DivergenceBracket<T>> {
    if !(lo > T::zero() && hi > lo) {
        return Err(Error::InvalidParameter(
            "bisection needs 0 < lo < hi".into(),
        ));
    }
    let mut runs = 0;
    let mut diverges = |delta: T| -> Result<bool> {
        let mut s = template.clone();
        s.settings.stepper.delta = delta;
        runs += 1;
        match run_scenario(&s) {
            Ok(t) => Ok(t.summary.diverged || !t.summary.final_output.is_finite()),
            Err(e) if e.is_solver_failure() => Ok(true),
            Err(e) => Err(e),
        }
    };
    if diverges(lo)? {
        return Ok(DivergenceBracket {
            stable: None,
            diverging: Some(lo),
            runs,
        });
    }
    if !diverges(hi)? {
        return Ok(DivergenceBracket {
            stable: Some(hi),
            diverging: None,
            runs,
        });
    }
    let (mut a, mut b) = (lo, hi);
    for _ in 0..iterations {
        let mid = (a + b) * T::lit(0.5);
        if diverges(mid)? {
            b = mid;
        } else {
            a = mid;
        }
    }
    Ok(DivergenceBracket {
        stable: Some(a),
        diverging: Some(b),
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> BuckBoostParams<f64> {
        BuckBoostParams::nominal()
    }

    fn scenario(kp: f64, ki: f64, kd: f64, delta: f64, t_final: f64, mode: Mode) -> Scenario<f64> {
        Scenario::buck_boost(
            p(),
            PidGains::scalar(kp, ki, kd).unwrap(),
            delta,
            t_final,
            35.0,
            mode,
        )
    }

    fn at_equilibrium(mut s: Scenario<f64>) -> Scenario<f64> {
        let eq = model::buck_boost_reference(&p(), 35.0).unwrap();
        s.xi0 = controller::xi_star(&s.gains, &eq).unwrap();
        s.x0 = eq.x_star;
        s
    }

    #[test]
    fn mode_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("rk4".parse::<Mode>().is_err());
    }

    #[test]
    fn dt_step_at_equilibrium_is_stationary() {
        let eq = model::buck_boost_reference(&p(), 35.0).unwrap();
        let g = PidGains::scalar(0.1, 0.1, 6e-4).unwrap();
        let m = model::buck_boost_model(&p()).unwrap();
        let xs = controller::xi_star(&g, &eq).unwrap();
        let st = LoopState::new(eq.x_star.clone(), xs.clone());
        let out = closed_loop_step_dt(
            &m,
            &g,
            &eq,
            &st,
            &LoopSettings::new(StepperSettings::with_delta(5e-3)),
        )
        .unwrap();
        assert!((&out.state.x - &eq.x_star).norm() <= 1e-15);
        assert!((&out.state.xi - &xs).norm() <= 1e-12);
        assert!((out.record.u[0] - eq.u_star[0]).abs() <= 1e-12);
    }

    #[test]
    fn dt_step_satisfies_both_relations() {
        let eq = model::buck_boost_reference(&p(), 35.0).unwrap();
        let g = PidGains::scalar(0.1, 0.1, 6e-4).unwrap();
        let m = model::buck_boost_model(&p()).unwrap();
        let settings = LoopSettings::new(StepperSettings::with_delta(5e-3));
        let mut st = LoopState::new(DVector::zeros(2), DVector::zeros(1));
        for _ in 0..200 {
            let out = closed_loop_step_dt(&m, &g, &eq, &st, &settings).unwrap();
            let z = out.record.z.clone().unwrap();
            let (rp, rc) = coupled_residuals(&m, &g, &eq, &st, 5e-3, &z, &out.record.u).unwrap();
            assert!(
                rp <= 1e-10 && rc <= 1e-10 * (1.0 + out.record.u.norm()),
                "{rp} {rc}"
            );
            st = out.state;
        }
    }

    #[test]
    fn euler_and_emulation_stationary_at_equilibrium() {
        for mode in [Mode::DtEuler, Mode::Emulation] {
            let mut s = at_equilibrium(scenario(0.1, 0.1, 6e-4, 1e-5, 1e-3, mode));
            s.settings.stepper.substeps = 10;
            let tr = run_scenario(&s).unwrap();
            let x_star = &tr.segments[0].eq.x_star;
            assert!(
                (&tr.final_state.x - x_star).norm() <= 1e-12 * x_star.norm(),
                "{mode}"
            );
            assert!(!tr.summary.diverged);
        }
    }

    #[test]
    fn single_step_horizon_gives_single_record() {
        let tr = run_scenario(&scenario(0.1, 0.1, 6e-4, 5e-3, 5e-3, Mode::DtMidpoint)).unwrap();
        assert_eq!(tr.records.len(), 1);
        assert_eq!(tr.summary.steps, 1);
    }

    #[test]
    fn record_every_decimates_but_keeps_last() {
        let mut s = scenario(0.1, 0.1, 6e-4, 5e-3, 0.1, Mode::DtMidpoint);
        s.record_every = 7;
        let tr = run_scenario(&s).unwrap();
        let ks: Vec<usize> = tr.records.iter().map(|r| r.k).collect();
        assert_eq!(ks, vec![0, 7, 14, 19]);
    }

    #[test]
    fn reruns_are_bitwise_identical() {
        let s = scenario(0.3, 0.2, 1e-3, 5e-3, 0.5, Mode::DtMidpoint);
        assert_eq!(run_scenario(&s).unwrap(), run_scenario(&s).unwrap());
    }

    #[test]
    fn fig2_gains_converge_with_lyapunov_decrease() {
        let tr = run_scenario(&scenario(0.1, 0.1, 6e-4, 5e-3, 6.0, Mode::DtMidpoint)).unwrap();
        let s = &tr.summary;
        assert!(s.final_tracking_error < 0.01, "{s:?}");
        for r in &tr.records {
            assert!(r.dv <= 1e-8 * r.v.abs().max(1.0), "k={} dv={}", r.k, r.dv);
        }
    }

    #[test]
    fn euler_diverges_at_large_delta() {
        let tr = run_scenario(&scenario(1e-4, 1e-4, 1e-3, 6e-2, 50.0, Mode::DtEuler)).unwrap();
        assert!(tr.summary.diverged);
        assert!(tr.final_state.x.norm() > 1e6);
        let mid = run_scenario(&scenario(1e-4, 1e-4, 1e-3, 6e-2, 50.0, Mode::DtMidpoint)).unwrap();
        assert!(!mid.summary.diverged);
    }

    #[test]
    fn emulation_requires_substeps() {
        let mut s = scenario(0.1, 0.1, 6e-4, 5e-5, 1e-3, Mode::Emulation);
        s.settings.stepper.substeps = 5;
        assert!(matches!(run_scenario(&s), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn reference_change_refreshes_equilibrium_and_keeps_integrator() {
        let mut s = scenario(0.1, 0.1, 6e-4, 5e-3, 0.2, Mode::DtMidpoint);
        s.schedule = vec![
            ScheduleEntry {
                time: 0.0,
                target: Target::Voltage(18.0),
            },
            ScheduleEntry {
                time: 0.1,
                target: Target::Voltage(35.0),
            },
        ];
        let tr = run_scenario(&s).unwrap();
        assert_eq!(tr.segments[1].start_step, 20);
        let before = &tr.records[19];
        let after = &tr.records[20];
        assert_eq!((before.segment, after.segment), (0, 1));
        assert_eq!(before.xi_next, after.xi);
        assert_eq!(tr.summary.target_output, 35.0);
    }

    #[test]
    fn schedule_validation() {
        let mut s = scenario(0.1, 0.1, 6e-4, 5e-3, 1.0, Mode::DtMidpoint);
        s.schedule[0].time = 0.1;
        assert!(s.validate().is_err());
        let mut s = scenario(0.1, 0.1, 6e-4, 5e-3, 1.0, Mode::DtMidpoint);
        s.schedule.push(ScheduleEntry {
            time: 2.0,
            target: Target::Voltage(1.0),
        });
        assert!(s.validate().is_err());
        let mut s = scenario(0.1, 0.1, 6e-4, 5e-3, 1.0, Mode::DtMidpoint);
        s.schedule.clear();
        assert!(s.validate().is_err());
    }

    #[test]
    fn sweep_preserves_order_and_isolates_failures() {
        let s = scenario(0.1, 0.1, 6e-4, 5e-3, 0.1, Mode::DtMidpoint);
        let axis = SweepAxis::Reference(vec![
            Target::Voltage(20.0),
            Target::Voltage(-5.0),
            Target::Voltage(30.0),
        ]);
        let runs = sweep(&s, &axis).unwrap();
        assert_eq!(runs.len(), 3);
        assert!(runs[0].outcome.is_ok() && runs[2].outcome.is_ok());
        assert!(runs[1].outcome.is_err());
        assert!((runs[2].outcome.as_ref().unwrap().target_output - 30.0).abs() < 1e-12);
        assert!(sweep(&s, &SweepAxis::Delta(vec![])).is_err());
    }

    #[test]
    fn single_value_sweep_matches_run() {
        let s = scenario(0.1, 0.1, 6e-4, 5e-3, 0.1, Mode::DtMidpoint);
        let runs = sweep(&s, &SweepAxis::Delta(vec![5e-3])).unwrap();
        assert_eq!(
            runs[0].outcome.as_ref().unwrap(),
            &run_scenario(&s).unwrap().summary
        );
    }

    #[test]
    fn clamp_keeps_duty_ratio_in_unit_interval() {
        let mut s = scenario(10.0, 10.0, 1e-3, 5e-3, 0.2, Mode::DtMidpoint);
        s.settings.clamp_u = true;
        let tr = run_scenario(&s).unwrap();
        assert!(tr.records.iter().all(|r| r.u[0] >= 0.0 && r.u[0] <= 1.0));
    }

    #[test]
    fn settling_time_definition() {
        let mut t = Tracker::new(1.0, 0.1, 5.0);
        t.push(1.5, 0.05);
        t.push(2.0, 0.2);
        t.push(2.5, 0.01);
        t.push(3.0, 0.02);
        assert_eq!(t.settling_time(), Some(1.5));
        t.push(3.5, 1.0);
        assert_eq!(t.settling_time(), None);
        assert_eq!(Tracker::new(0.0, 0.1, 0.0).settling_time(), Some(0.0));
    }
}
