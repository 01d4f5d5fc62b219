#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use pidpbc_core::{BilinearPHModel, BuckBoost, Model};
use rand::Rng;

pub fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_vec(xs.to_vec())
}

pub fn nominal() -> (BuckBoost, Model) {
    let p = BuckBoost::nominal();
    (p, pidpbc_core::buck_boost_model(&p).unwrap())
}

fn mat<R: Rng>(rng: &mut R, n: usize, m: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0) * scale)
}

fn skew<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let a = mat(rng, n, n, 1.0);
    &a - a.transpose()
}

/// A random valid bilinear PH model with `n` states and `m` inputs.
pub fn random_model<R: Rng>(rng: &mut R, n: usize, m: usize) -> Model {
    let q = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| {
        10f64.powf(rng.random_range(-1.0..2.0))
    }));
    let b = mat(rng, n, n, 0.5);
    let r = &b * b.transpose();
    BilinearPHModel::new(
        q,
        skew(rng, n),
        (0..m).map(|_| skew(rng, n)).collect(),
        r,
        mat(rng, n, n, 1.0),
        (0..m).map(|_| mat(rng, n, n, 1.0)).collect(),
        DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0)),
    )
    .unwrap()
}

pub fn random_vec<R: Rng>(rng: &mut R, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0) * scale)
}
