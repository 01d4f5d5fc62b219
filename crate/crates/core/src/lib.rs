//! Discrete-time PID passivity-based control for bilinear port-Hamiltonian
//! power converters.
//!
//! The crate provides the converter model ([`model`]), structure-preserving
//! time stepping ([`discretize`]), the sampled PID-PBC law ([`controller`]),
//! closed-loop simulation ([`engine`]) and executable checks of the
//! passivity and Lyapunov identities ([`verify`]).
//!
//! Everything numerical is generic over [`Scalar`] (`f32` or `f64`). The
//! aliases below fix the scalar to `f64`, with `*32` variants for `f32`.

// `!(a < b)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controller;
pub mod discretize;
pub mod engine;
pub mod error;
pub mod linalg;
pub mod model;
pub mod scalar;
pub mod verify;

pub use controller::{
    controller_storage, ct_pid_derivative, dt_pid_output, xi_star, ControllerState, PidGains,
};
pub use discretize::{
    build_nm, euler_step, midpoint_step_explicit, midpoint_step_newton, reference_trajectory,
    rk4_hold, MidpointSolution, StepperSettings,
};
pub use engine::{
    bisect_divergence, closed_loop_step_dt, closed_loop_step_emulation, closed_loop_step_euler,
    run_scenario, sweep, DivergenceBracket, LoopSettings, LoopState, Mode, Plant, ReferenceSegment,
    Scenario, ScheduleEntry, StepRecord, Summary, SweepAxis, SweepRun, Target, Trajectory,
};
pub use error::{Error, Result};
pub use model::{
    buck_boost_model, buck_boost_reference, buck_boost_state, BilinearPHModel, BuckBoostParams,
    EquilibriumSpec,
};
pub use scalar::Scalar;
pub use verify::{
    check_controller_passivity, check_energy_log, check_lyapunov, check_plant_passivity,
    damping_injection, order_check, CheckOutcome, CheckReport, DampingReport, Integrator,
    OrderReport, StepView,
};

pub type Model = BilinearPHModel<f64>;
pub type Equilibrium = EquilibriumSpec<f64>;
pub type BuckBoost = BuckBoostParams<f64>;
pub type Gains = PidGains<f64>;
pub type Settings = StepperSettings<f64>;
pub type Sim = Scenario<f64>;
pub type Traj = Trajectory<f64>;
pub type Record = StepRecord<f64>;
pub type Report = CheckReport<f64>;

pub type Model32 = BilinearPHModel<f32>;
pub type Equilibrium32 = EquilibriumSpec<f32>;
pub type BuckBoost32 = BuckBoostParams<f32>;
pub type Gains32 = PidGains<f32>;
pub type Settings32 = StepperSettings<f32>;
pub type Sim32 = Scenario<f32>;
pub type Traj32 = Trajectory<f32>;
