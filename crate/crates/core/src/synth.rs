//! Seeded random constructions used by tests, the acceptance suite and the
//! toy fixture generator.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::cayley;

/// Matrix with i.i.d. standard normal entries.
pub fn random_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Exactly skew-symmetric matrix with Frobenius norm `norm`.
pub fn random_skew<R: Rng + ?Sized>(rng: &mut R, d: usize, norm: f64) -> DMatrix<f64> {
    let g = random_matrix(rng, d, d);
    let q = (&g - g.transpose()) * 0.5;
    let n = q.norm();
    if n == 0.0 {
        q
    } else {
        q * (norm / n)
    }
}

/// Random orthogonal matrix from the Cayley transform of a random generator.
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, d: usize) -> DMatrix<f64> {
    let q = random_skew(rng, d, 1.0 + d as f64 * 0.25);
    cayley(&q)
        .expect("skew generator always has a Cayley transform")
        .into_matrix()
}

/// Matrix `U diag(sigma) V^T` with random orthonormal factors and the given
/// singular values (`sigma.len() <= min(rows, cols)`).
pub fn with_spectrum<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    sigma: &[f64],
) -> DMatrix<f64> {
    let u = random_orthogonal(rng, rows);
    let v = random_orthogonal(rng, cols);
    let mut s = DMatrix::zeros(rows, cols);
    for (i, &value) in sigma.iter().enumerate() {
        s[(i, i)] = value;
    }
    u * s * v.transpose()
}

/// Descending spectrum whose consecutive ratios are at least `ratio`.
pub fn separated_spectrum(k: usize, top: f64, ratio: f64) -> Vec<f64> {
    (0..k).map(|i| top / ratio.powi(i as i32)).collect()
}
