//! Finite-difference helpers shared by the unit tests.

use rand::Rng;

use crate::numerics::Matrix;
use crate::rng::{substream, Domain};

pub fn random_matrix(rows: usize, cols: usize, seed: u64, scale: f64) -> Matrix {
    let mut rng = substream(seed, Domain::Init, 999);
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Central differences of `f` with respect to every coordinate of `x`.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest absolute deviation, relative to the largest reference magnitude.
pub fn max_rel_err(analytic: &[f64], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    analytic
        .iter()
        .zip(reference)
        .map(|(a, r)| (a - r).abs() / scale)
        .fold(0.0, f64::max)
}
