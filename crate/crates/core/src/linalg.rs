//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Induced 1-norm (max absolute column sum).
pub fn norm1<T: Scalar>(a: &DMatrix<T>) -> T {
    a.column_iter()
        .map(|c| c.iter().fold(T::zero(), |s, v| s + v.mag()))
        .fold(T::zero(), |m, v| m.max(v))
}

pub fn max_abs<T: Scalar>(a: &DMatrix<T>) -> T {
    a.iter().fold(T::zero(), |m, v| m.max(v.mag()))
}

fn huge<T: Scalar>() -> T {
    T::max_value().unwrap_or_else(|| T::lit(f64::MAX))
}

/// Inverse together with the 1-norm condition number. Returns `Err(cond)`
/// when the matrix is singular to working precision.
pub fn inverse_with_condition<T: Scalar>(
    a: &DMatrix<T>,
) -> std::result::Result<(DMatrix<T>, T), T> {
    let inv = a.clone().lu().try_inverse().ok_or_else(huge)?;
    let cond = norm1(a) * norm1(&inv);
    if !cond.is_finite() || cond * T::eps() > T::one() {
        return Err(cond);
    }
    Ok((inv, cond))
}

/// Solves `a x = b`, rejecting systems that are singular to working precision.
/// The error carries the condition estimate.
pub fn solve_conditioned<T: Scalar>(
    a: &DMatrix<T>,
    b: &DVector<T>,
) -> std::result::Result<DVector<T>, T> {
    let lu = a.clone().lu();
    let inv = lu.try_inverse().ok_or_else(huge)?;
    let cond = norm1(a) * norm1(&inv);
    if !cond.is_finite() || cond * T::eps() > T::one() {
        return Err(cond);
    }
    lu.solve(b).ok_or(cond)
}

pub fn is_square<T: Scalar>(a: &DMatrix<T>, n: usize) -> bool {
    a.nrows() == n && a.ncols() == n
}

pub fn all_finite<T: Scalar>(a: &DMatrix<T>) -> bool {
    a.iter().all(|v| v.is_finite())
}

pub fn all_finite_vec<T: Scalar>(a: &DVector<T>) -> bool {
    a.iter().all(|v| v.is_finite())
}

fn sym_tol<T: Scalar>(a: &DMatrix<T>) -> T {
    T::lit(64.0) * T::eps() * (T::one() + max_abs(a))
}

pub fn is_symmetric<T: Scalar>(a: &DMatrix<T>) -> bool {
    let tol = sym_tol(a);
    (a - a.transpose()).iter().all(|v| v.mag() <= tol)
}

pub fn is_skew<T: Scalar>(a: &DMatrix<T>) -> bool {
    let tol = sym_tol(a);
    (a + a.transpose()).iter().all(|v| v.mag() <= tol)
}

/// Smallest eigenvalue of a symmetric matrix (the symmetric part is used).
pub fn min_sym_eigenvalue<T: Scalar>(a: &DMatrix<T>) -> T {
    let sym = (a + a.transpose()) * T::lit(0.5);
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .fold(huge(), |m, v| m.min(*v))
}

pub fn is_positive_definite<T: Scalar>(a: &DMatrix<T>) -> bool {
    is_symmetric(a) && a.clone().cholesky().is_some()
}

pub fn is_positive_semidefinite<T: Scalar>(a: &DMatrix<T>) -> bool {
    is_symmetric(a) && min_sym_eigenvalue(a) >= -sym_tol(a)
}

pub(crate) fn check_len<T: Scalar>(v: &DVector<T>, n: usize, what: &str) -> Result<()> {
    if v.len() != n {
        return Err(Error::Dimension(format!(
            "{what} has length {}, expected {n}",
            v.len()
        )));
    }
    Ok(())
}

/// `max(1, |a|, |b|)`, the per-step scale for relative identity residuals.
pub fn rel_scale<T: Scalar>(a: T, b: T) -> T {
    T::one().max(a.mag()).max(b.mag())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn condition_of_identity_is_one() {
        let (_, c) = inverse_with_condition(&DMatrix::<f64>::identity(3, 3)).unwrap();
        assert!((c - 1.0).abs() < 1e-15);
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(inverse_with_condition(&a).is_err());
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-20]);
        assert!(solve_conditioned(&b, &DVector::from_vec(vec![1.0, 1.0])).is_err());
    }

    #[test]
    fn min_eigenvalue_of_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0_f64, -1.0, 2.0]));
        assert!((min_sym_eigenvalue(&a) + 1.0).abs() < 1e-14);
        assert!(!is_positive_semidefinite(&a));
    }
}
