//! Activation-space geometry between base and finetuned activations on the
//! same examples: Procrustes residual, linear CKA and pairwise Gram
//! distortion.
//!
//! Procrustes and CKA work on column-centered data. Gram distortion works on
//! raw rows scaled to unit norm.

use nalgebra::DMatrix;

use crate::error::{GeoError, Result};
use crate::linalg::procrustes_rotation;
use crate::tensorio::Distribution;

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct ActGeomReport {
    pub module: String,
    pub distribution: Distribution,
    pub procrustes_residual: f64,
    pub cka: f64,
    pub gram_distortion: f64,
    /// `||X1 - X0||_F / ||X0||_F` on centered data, a debug control.
    pub raw_residual: f64,
    pub n_examples: usize,
    /// Rows dropped from the Gram comparison for having zero norm.
    pub dropped_rows: usize,
}

pub fn center_columns(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.nrows() < 2 {
        return Err(GeoError::DegenerateInput(format!(
            "centering needs at least 2 rows, got {}",
            x.nrows()
        )));
    }
    let mut out = x.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    Ok(out)
}

fn same_shape(x0: &DMatrix<f64>, x1: &DMatrix<f64>, what: &str) -> Result<()> {
    if x0.shape() != x1.shape() {
        return Err(GeoError::shape(
            what,
            format!("{:?}", x0.shape()),
            format!("{:?}", x1.shape()),
        ));
    }
    Ok(())
}

/// `min_R ||X1 R - X0||_F / (||X0||_F + eps)` over orthogonal `R`, after
/// centering both inputs.
pub fn procrustes_residual(x0: &DMatrix<f64>, x1: &DMatrix<f64>, epsilon: f64) -> Result<f64> {
    same_shape(x0, x1, "procrustes residual")?;
    let c0 = center_columns(x0)?;
    let c1 = center_columns(x1)?;
    let r = procrustes_rotation(&c0, &c1)?;
    Ok((c1 * r.matrix() - &c0).norm() / (c0.norm() + epsilon))
}

/// `||X0^T X1||_F^2 / (||X0^T X0||_F ||X1^T X1||_F + eps)` on centered data.
/// Feature dimensions may differ.
pub fn linear_cka(x0: &DMatrix<f64>, x1: &DMatrix<f64>, epsilon: f64) -> Result<f64> {
    if x0.nrows() != x1.nrows() {
        return Err(GeoError::shape(
            "linear CKA examples",
            format!("{} rows", x0.nrows()),
            format!("{} rows", x1.nrows()),
        ));
    }
    let c0 = center_columns(x0)?;
    let c1 = center_columns(x1)?;
    if c0.iter().all(|v| *v == 0.0) || c1.iter().all(|v| *v == 0.0) {
        return Err(GeoError::DegenerateInput(
            "linear CKA of an input that is constant across examples".into(),
        ));
    }
    let cross = (c0.transpose() * &c1).norm_squared();
    let self0 = (c0.transpose() * &c0).norm();
    let self1 = (c1.transpose() * &c1).norm();
    Ok(cross / (self0 * self1 + epsilon))
}

/// Gram distortion with the number of zero-norm rows that were dropped.
///
/// A row is dropped from both inputs when it has zero norm in either.
pub fn gram_distortion_counted(
    x0: &DMatrix<f64>,
    x1: &DMatrix<f64>,
    epsilon: f64,
) -> Result<(f64, usize)> {
    same_shape(x0, x1, "gram distortion")?;
    let keep: Vec<usize> = (0..x0.nrows())
        .filter(|&i| x0.row(i).norm() > 0.0 && x1.row(i).norm() > 0.0)
        .collect();
    let dropped = x0.nrows() - keep.len();
    if keep.is_empty() {
        return Err(GeoError::DegenerateInput(
            "gram distortion: every row has zero norm".into(),
        ));
    }
    let normalize = |x: &DMatrix<f64>| {
        let mut z = x.select_rows(&keep);
        for mut row in z.row_iter_mut() {
            let n = row.norm();
            row /= n;
        }
        z
    };
    let z0 = normalize(x0);
    let z1 = normalize(x1);
    let g0 = &z0 * z0.transpose();
    let g1 = &z1 * z1.transpose();
    Ok(((g1 - &g0).norm() / (g0.norm() + epsilon), dropped))
}

/// `||Z1 Z1^T - Z0 Z0^T||_F / (||Z0 Z0^T||_F + eps)` for row-normalized `Z`.
pub fn gram_distortion(x0: &DMatrix<f64>, x1: &DMatrix<f64>, epsilon: f64) -> Result<f64> {
    gram_distortion_counted(x0, x1, epsilon).map(|(d, _)| d)
}

/// All three metrics plus controls for one (module, distribution) pair.
pub fn compare(
    module: &str,
    distribution: Distribution,
    x0: &DMatrix<f64>,
    x1: &DMatrix<f64>,
    epsilon: f64,
) -> Result<ActGeomReport> {
    let procrustes = procrustes_residual(x0, x1, epsilon)?;
    let cka = linear_cka(x0, x1, epsilon)?;
    let (gram, dropped_rows) = gram_distortion_counted(x0, x1, epsilon)?;
    let c0 = center_columns(x0)?;
    let c1 = center_columns(x1)?;
    let raw_residual = (&c1 - &c0).norm() / (c0.norm() + epsilon);
    Ok(ActGeomReport {
        module: module.to_owned(),
        distribution,
        procrustes_residual: procrustes,
        cka,
        gram_distortion: gram,
        raw_residual,
        n_examples: x0.nrows(),
        dropped_rows,
    })
}
