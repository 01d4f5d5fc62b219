//! Bilinear port-Hamiltonian converter models.
//!
//! The averaged dynamics of a large class of DC-DC converters is
//!
//! ```text
//! xdot = (J0 - R + sum_i u_i J_i) Q x + (G0 + sum_i u_i G_i) E
//!      = f(x) + g(x) u
//! ```
//!
//! with state `x` made of inductor fluxes and capacitor charges, energy
//! `H(x) = 1/2 x^T Q x`, duty ratios `u`, and constant matrices. This module
//! holds the model, its assignable equilibria and the shifted-passive output
//! map `y = (g*)^T Q x`, plus the buck-boost instance.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, check_len};
use crate::scalar::Scalar;

/// Constant matrices of a bilinear port-Hamiltonian converter.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearPHModel<T: Scalar> {
    q: DMatrix<T>,
    j0: DMatrix<T>,
    j: Vec<DMatrix<T>>,
    r: DMatrix<T>,
    g0: DMatrix<T>,
    g: Vec<DMatrix<T>>,
    e: DVector<T>,
}

impl<T: Scalar> BilinearPHModel<T> {
    /// Builds a model after checking the structural invariants: `Q` symmetric
    /// positive definite, every `J` skew-symmetric, `R` symmetric positive
    /// semidefinite, consistent dimensions, finite entries.
    pub fn new(
        q: DMatrix<T>,
        j0: DMatrix<T>,
        j: Vec<DMatrix<T>>,
        r: DMatrix<T>,
        g0: DMatrix<T>,
        g: Vec<DMatrix<T>>,
        e: DVector<T>,
    ) -> Result<Self> {
        let n = q.nrows();
        if n == 0 {
            return Err(Error::InvalidModel(
                "state dimension must be positive".into(),
            ));
        }
        if j.is_empty() {
            return Err(Error::InvalidModel("at least one input is required".into()));
        }
        if j.len() != g.len() {
            return Err(Error::Dimension(format!(
                "{} interconnection matrices but {} input matrices",
                j.len(),
                g.len()
            )));
        }
        let squares = std::iter::once(("Q", &q))
            .chain(std::iter::once(("J0", &j0)))
            .chain(std::iter::once(("R", &r)))
            .chain(std::iter::once(("G0", &g0)))
            .chain(j.iter().map(|m| ("J_i", m)))
            .chain(g.iter().map(|m| ("G_i", m)));
        for (name, m) in squares {
            if !linalg::is_square(m, n) {
                return Err(Error::Dimension(format!(
                    "{name} is {}x{}, expected {n}x{n}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if !linalg::all_finite(m) {
                return Err(Error::InvalidModel(format!(
                    "{name} has non-finite entries"
                )));
            }
        }
        check_len(&e, n, "E")?;
        if !linalg::all_finite_vec(&e) {
            return Err(Error::InvalidModel("E has non-finite entries".into()));
        }
        if !linalg::is_positive_definite(&q) {
            return Err(Error::InvalidModel(
                "Q must be symmetric positive definite".into(),
            ));
        }
        if !linalg::is_skew(&j0) || !j.iter().all(linalg::is_skew) {
            return Err(Error::InvalidModel(
                "interconnection matrices must be skew-symmetric".into(),
            ));
        }
        if !linalg::is_positive_semidefinite(&r) {
            return Err(Error::InvalidModel(
                "R must be symmetric positive semidefinite".into(),
            ));
        }
        Ok(Self {
            q,
            j0,
            j,
            r,
            g0,
            g,
            e,
        })
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    /// Input dimension.
    pub fn m(&self) -> usize {
        self.j.len()
    }

    pub fn q(&self) -> &DMatrix<T> {
        &self.q
    }
    pub fn j0(&self) -> &DMatrix<T> {
        &self.j0
    }
    pub fn j(&self) -> &[DMatrix<T>] {
        &self.j
    }
    pub fn r(&self) -> &DMatrix<T> {
        &self.r
    }
    pub fn g0(&self) -> &DMatrix<T> {
        &self.g0
    }
    pub fn g(&self) -> &[DMatrix<T>] {
        &self.g
    }
    pub fn e(&self) -> &DVector<T> {
        &self.e
    }

    /// `f(x) = (J0 - R) Q x + G0 E`.
    pub fn eval_drift(&self, x: &DVector<T>) -> Result<DVector<T>> {
        check_len(x, self.n(), "state")?;
        Ok(self.drift(x))
    }

    /// `g(x)`, whose column `i` is `J_i Q x + G_i E`.
    pub fn eval_input_matrix(&self, x: &DVector<T>) -> Result<DMatrix<T>> {
        check_len(x, self.n(), "state")?;
        Ok(self.input_matrix(x))
    }

    /// `f(x) + g(x) u`.
    pub fn eval_field(&self, x: &DVector<T>, u: &DVector<T>) -> Result<DVector<T>> {
        check_len(x, self.n(), "state")?;
        check_len(u, self.m(), "input")?;
        Ok(self.field(x, u))
    }

    pub(crate) fn drift(&self, x: &DVector<T>) -> DVector<T> {
        (&self.j0 - &self.r) * (&self.q * x) + &self.g0 * &self.e
    }

    pub(crate) fn input_matrix(&self, x: &DVector<T>) -> DMatrix<T> {
        let qx = &self.q * x;
        let mut g = DMatrix::zeros(self.n(), self.m());
        for (i, (ji, gi)) in self.j.iter().zip(&self.g).enumerate() {
            g.set_column(i, &(ji * &qx + gi * &self.e));
        }
        g
    }

    pub(crate) fn field(&self, x: &DVector<T>, u: &DVector<T>) -> DVector<T> {
        self.drift(x) + self.input_matrix(x) * u
    }

    /// Stored energy `1/2 x^T Q x`.
    pub fn hamiltonian(&self, x: &DVector<T>) -> Result<T> {
        check_len(x, self.n(), "state")?;
        Ok(self.energy(x))
    }

    /// Incremental storage `1/2 (x - x*)^T Q (x - x*)`.
    pub fn shifted_storage(&self, x: &DVector<T>, x_star: &DVector<T>) -> Result<T> {
        check_len(x, self.n(), "state")?;
        check_len(x_star, self.n(), "equilibrium state")?;
        Ok(self.energy(&(x - x_star)))
    }

    pub(crate) fn energy(&self, x: &DVector<T>) -> T {
        x.dot(&(&self.q * x)) * T::lit(0.5)
    }

    /// Least-squares equilibrium control `u* = -[(g*)^T g*]^{-1} (g*)^T f*`.
    pub fn equilibrium_control(&self, x_star: &DVector<T>) -> Result<DVector<T>> {
        check_len(x_star, self.n(), "equilibrium state")?;
        let g = self.input_matrix(x_star);
        let f = self.drift(x_star);
        least_squares_control(&g, &f)
    }

    /// Equilibrium bundle for `x_star`, accepted when the residual of
    /// `0 = f* + g* u*` is at most `tol * (1 + |f*|)`.
    pub fn make_equilibrium(&self, x_star: &DVector<T>, tol: T) -> Result<EquilibriumSpec<T>> {
        check_len(x_star, self.n(), "equilibrium state")?;
        if !linalg::all_finite_vec(x_star) {
            return Err(Error::InvalidParameter(
                "equilibrium state must be finite".into(),
            ));
        }
        let g_star = self.input_matrix(x_star);
        let f_star = self.drift(x_star);
        let u_star = least_squares_control(&g_star, &f_star)?;
        let residual = (&f_star + &g_star * &u_star).norm();
        let bound = tol * (T::one() + f_star.norm());
        if !(residual <= bound) {
            return Err(Error::NotAssignable {
                residual: residual.as_f64(),
                bound: bound.as_f64(),
            });
        }
        let c_mat = g_star.transpose() * &self.q;
        let y_star = &c_mat * x_star;
        Ok(EquilibriumSpec {
            x_star: x_star.clone(),
            u_star,
            y_star,
            c_mat,
            g_star,
            residual,
        })
    }
}

fn least_squares_control<T: Scalar>(g: &DMatrix<T>, f: &DVector<T>) -> Result<DVector<T>> {
    let gram = g.transpose() * g;
    let rhs = g.transpose() * f;
    let sol = linalg::solve_conditioned(&gram, &rhs).map_err(|_| Error::RankDeficient)?;
    Ok(-sol)
}

/// Default relative assignability tolerance.
pub fn default_assignability_tol<T: Scalar>() -> T {
    T::lit(1e-9).max(T::lit(1e3) * T::eps())
}

/// One assignable operating point with its passive-output data.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumSpec<T: Scalar> {
    pub x_star: DVector<T>,
    pub u_star: DVector<T>,
    /// `y* = C x*`.
    pub y_star: DVector<T>,
    /// Controller output matrix `C = (g*)^T Q` (m x n).
    pub c_mat: DMatrix<T>,
    /// `g(x*)` (n x m).
    pub g_star: DMatrix<T>,
    /// `|f* + g* u*|`.
    pub residual: T,
}

impl<T: Scalar> EquilibriumSpec<T> {
    /// Passive output `C x` for any state (the DT plant feeds the midpoint).
    pub fn output(&self, x: &DVector<T>) -> DVector<T> {
        &self.c_mat * x
    }

    /// Incremental passive output `C x - y*`.
    pub fn output_error(&self, x: &DVector<T>) -> DVector<T> {
        &self.c_mat * x - &self.y_star
    }
}

/// Buck-boost circuit parameters (SI units).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuckBoostParams<T: Scalar> {
    /// Source voltage (V).
    pub v_in: T,
    /// Inductance (H).
    pub inductance: T,
    /// Capacitance (F).
    pub capacitance: T,
    /// Load resistance (Ohm).
    pub resistance: T,
}

impl<T: Scalar> BuckBoostParams<T> {
    pub fn new(v_in: T, inductance: T, capacitance: T, resistance: T) -> Result<Self> {
        let p = Self {
            v_in,
            inductance,
            capacitance,
            resistance,
        };
        p.validate()?;
        Ok(p)
    }

    /// The 24 V / 1 mH / 330 uF / 60 Ohm converter of the simulation study.
    pub fn nominal() -> Self {
        Self {
            v_in: T::lit(24.0),
            inductance: T::lit(1000e-6),
            capacitance: T::lit(330e-6),
            resistance: T::lit(60.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("v_in", self.v_in),
            ("inductance", self.inductance),
            ("capacitance", self.capacitance),
            ("resistance", self.resistance),
        ];
        for (name, v) in named {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Inductor current `i = x1 / L`.
    pub fn current(&self, x: &DVector<T>) -> T {
        x[0] / self.inductance
    }

    /// Output voltage `v = x2 / C`.
    pub fn voltage(&self, x: &DVector<T>) -> T {
        x[1] / self.capacitance
    }
}

/// Buck-boost converter in bilinear port-Hamiltonian form, `x = (flux, charge)`.
pub fn buck_boost_model<T: Scalar>(p: &BuckBoostParams<T>) -> Result<BilinearPHModel<T>> {
    p.validate()?;
    let (o, l) = (T::zero(), T::one());
    let j0 = DMatrix::from_row_slice(2, 2, &[o, -l, l, o]);
    let j1 = -j0.clone();
    let r = DMatrix::from_row_slice(2, 2, &[o, o, o, l / p.resistance]);
    let g0 = DMatrix::zeros(2, 2);
    let g1 = DMatrix::from_row_slice(2, 2, &[l, o, o, o]);
    let e = DVector::from_vec(vec![p.v_in, o]);
    let q = DMatrix::from_row_slice(2, 2, &[l / p.inductance, o, o, l / p.capacitance]);
    BilinearPHModel::new(q, j0, vec![j1], r, g0, vec![g1], e)
}

/// Equilibrium state regulating the output voltage to `v_star` (V):
/// `x2* = C v*`, `x1* = L x2* (x2* + V_in C) / (r C^2 V_in)`.
pub fn buck_boost_state<T: Scalar>(p: &BuckBoostParams<T>, v_star: T) -> Result<DVector<T>> {
    p.validate()?;
    if !(v_star >= T::zero()) || !v_star.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "buck-boost reference must be a finite nonnegative voltage, got {v_star}"
        )));
    }
    let c = p.capacitance;
    let x2 = c * v_star;
    let x1 = p.inductance * x2 * (x2 + p.v_in * c) / (p.resistance * c * c * p.v_in);
    Ok(DVector::from_vec(vec![x1, x2]))
}

/// Equilibrium bundle for the buck-boost output-voltage reference `v_star`.
pub fn buck_boost_reference<T: Scalar>(
    p: &BuckBoostParams<T>,
    v_star: T,
) -> Result<EquilibriumSpec<T>> {
    let x_star = buck_boost_state(p, v_star)?;
    let model = buck_boost_model(p)?;
    model.make_equilibrium(&x_star, T::lit(1e-12).max(T::lit(1e3) * T::eps()))
}
