//! PID passivity-based controllers.
//!
//! The DT law is the midpoint discretization of `xi' = y~`,
//! `u = -Kp y~ - Ki xi - Kd y~'`, fed with the midpoint passive output:
//!
//! ```text
//! xi+ = xi + delta y~
//! u   = -Kp y~ - 1/2 Ki (xi+ + xi) - (1/delta) Kd C (x+ - x)
//! ```
//!
//! Its storage `Hc = 1/2 xi~^T Ki xi~ + 1/2 x~^T C^T Kd C x~` satisfies
//! `(1/delta) dHc = -y~^T Kp y~ - y~^T u~` exactly.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, check_len};
use crate::model::EquilibriumSpec;
use crate::scalar::Scalar;

/// PID gain matrices: `Kp`, `Ki` symmetric positive definite, `Kd` positive semidefinite.
#[derive(Debug, Clone, PartialEq)]
pub struct PidGains<T: Scalar> {
    pub kp: DMatrix<T>,
    pub ki: DMatrix<T>,
    pub kd: DMatrix<T>,
}

impl<T: Scalar> PidGains<T> {
    pub fn new(kp: DMatrix<T>, ki: DMatrix<T>, kd: DMatrix<T>) -> Result<Self> {
        let m = kp.nrows();
        for (name, k) in [("Kp", &kp), ("Ki", &ki), ("Kd", &kd)] {
            if !linalg::is_square(k, m) {
                return Err(Error::Dimension(format!(
                    "{name} is {}x{}, expected {m}x{m}",
                    k.nrows(),
                    k.ncols()
                )));
            }
            if !linalg::all_finite(k) {
                return Err(Error::InvalidParameter(format!(
                    "{name} has non-finite entries"
                )));
            }
        }
        if !linalg::is_positive_definite(&kp) {
            return Err(Error::InvalidParameter(
                "Kp must be symmetric positive definite".into(),
            ));
        }
        if !linalg::is_positive_definite(&ki) {
            return Err(Error::InvalidParameter(
                "Ki must be symmetric positive definite".into(),
            ));
        }
        if !linalg::is_positive_semidefinite(&kd) {
            return Err(Error::InvalidParameter(
                "Kd must be symmetric positive semidefinite".into(),
            ));
        }
        Ok(Self { kp, ki, kd })
    }

    /// Scalar gains times the `m x m` identity.
    pub fn uniform(m: usize, kp: T, ki: T, kd: T) -> Result<Self> {
        let id = DMatrix::<T>::identity(m, m);
        Self::new(&id * kp, &id * ki, &id * kd)
    }

    /// Single-input scalar gains.
    pub fn scalar(kp: T, ki: T, kd: T) -> Result<Self> {
        Self::uniform(1, kp, ki, kd)
    }

    pub fn m(&self) -> usize {
        self.kp.nrows()
    }
}

/// Integrator value and, for the sampled-data laws, the previous plant sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState<T: Scalar> {
    pub xi: DVector<T>,
    pub x_prev: Option<DVector<T>>,
}

/// Integrator equilibrium `xi* = -Ki^{-1} u*`.
pub fn xi_star<T: Scalar>(gains: &PidGains<T>, eq: &EquilibriumSpec<T>) -> Result<DVector<T>> {
    check_len(&eq.u_star, gains.m(), "equilibrium control")?;
    let chol = gains
        .ki
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidParameter("Ki is not positive definite".into()))?;
    Ok(-chol.solve(&eq.u_star))
}

/// DT PID-PBC: returns `(u_k, xi_{k+1})` given the passive-output error
/// `y~_k` and the state increment `dx_k = x_{k+1} - x_k`.
pub fn dt_pid_output<T: Scalar>(
    gains: &PidGains<T>,
    eq: &EquilibriumSpec<T>,
    xi: &DVector<T>,
    y_tilde: &DVector<T>,
    dx: &DVector<T>,
    delta: T,
) -> Result<(DVector<T>, DVector<T>)> {
    let m = gains.m();
    check_len(xi, m, "integrator state")?;
    check_len(y_tilde, m, "output error")?;
    check_len(dx, eq.c_mat.ncols(), "state increment")?;
    if eq.c_mat.nrows() != m {
        return Err(Error::Dimension(format!(
            "C has {} rows, gains are {m}x{m}",
            eq.c_mat.nrows()
        )));
    }
    if !(delta > T::zero()) {
        return Err(Error::InvalidParameter(format!(
            "delta must be positive, got {delta}"
        )));
    }
    Ok(dt_law(gains, &eq.c_mat, xi, y_tilde, dx, delta))
}

pub(crate) fn dt_law<T: Scalar>(
    gains: &PidGains<T>,
    c_mat: &DMatrix<T>,
    xi: &DVector<T>,
    y_tilde: &DVector<T>,
    dx: &DVector<T>,
    delta: T,
) -> (DVector<T>, DVector<T>) {
    let xi_next = xi + y_tilde * delta;
    let u = -(&gains.kp * y_tilde)
        - &gains.ki * (&xi_next + xi) * T::lit(0.5)
        - &gains.kd * (c_mat * dx) / delta;
    (u, xi_next)
}

/// Controller storage `1/2 xi~^T Ki xi~ + 1/2 x~^T C^T Kd C x~`.
pub fn controller_storage<T: Scalar>(
    gains: &PidGains<T>,
    eq: &EquilibriumSpec<T>,
    xi: &DVector<T>,
    x: &DVector<T>,
    xi_star: &DVector<T>,
    x_star: &DVector<T>,
) -> Result<T> {
    check_len(xi, gains.m(), "integrator state")?;
    check_len(xi_star, gains.m(), "integrator equilibrium")?;
    check_len(x, eq.c_mat.ncols(), "state")?;
    check_len(x_star, eq.c_mat.ncols(), "equilibrium state")?;
    Ok(storage(gains, &eq.c_mat, xi, x, xi_star, x_star))
}

pub(crate) fn storage<T: Scalar>(
    gains: &PidGains<T>,
    c_mat: &DMatrix<T>,
    xi: &DVector<T>,
    x: &DVector<T>,
    xi_star: &DVector<T>,
    x_star: &DVector<T>,
) -> T {
    let dxi = xi - xi_star;
    let cx = c_mat * (x - x_star);
    (dxi.dot(&(&gains.ki * &dxi)) + cx.dot(&(&gains.kd * &cx))) * T::lit(0.5)
}

/// CT PID-PBC right-hand side: `(u, xi')` with `xi' = y~`,
/// `u = -Kp y~ - Ki xi - Kd y~'`.
pub fn ct_pid_derivative<T: Scalar>(
    gains: &PidGains<T>,
    xi: &DVector<T>,
    y_tilde: &DVector<T>,
    y_tilde_dot: &DVector<T>,
) -> Result<(DVector<T>, DVector<T>)> {
    let m = gains.m();
    check_len(xi, m, "integrator state")?;
    check_len(y_tilde, m, "output error")?;
    check_len(y_tilde_dot, m, "output error rate")?;
    let u = -(&gains.kp * y_tilde) - &gains.ki * xi - &gains.kd * y_tilde_dot;
    Ok((u, y_tilde.clone()))
}
