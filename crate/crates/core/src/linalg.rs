//! Dense kernels shared by the diagnostics: sign-normalized SVD, orthogonal
//! Procrustes, the Cayley transform and spectral-entropy effective rank.

use nalgebra::{DMatrix, DVector, SVD};

use crate::error::{GeoError, Result};

/// Thin SVD `W = U diag(sigma) V^T` with descending singular values.
///
/// Columns are sign-normalized: the largest-magnitude entry of every `U`
/// column is nonnegative, and the matching `V` column is flipped with it.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    /// `out_dim x k`
    pub u: DMatrix<f64>,
    /// `k` values, non-increasing
    pub sigma: DVector<f64>,
    /// `in_dim x k`
    pub v: DMatrix<f64>,
}

impl SpectralBasis {
    pub fn rank_bound(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.u * DMatrix::from_diagonal(&self.sigma) * self.v.transpose()
    }
}

fn singular_decomposition(w: &DMatrix<f64>, module: &str) -> Result<SVD<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    if w.is_empty() {
        return Err(GeoError::DegenerateInput(format!("SVD of zero-size matrix ({module})")));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(GeoError::NumericalFailure {
            module: module.to_owned(),
            reason: "non-finite entry before SVD".into(),
        });
    }
    let max_iter = 200 * w.nrows().max(w.ncols()).max(10);
    SVD::try_new(w.clone(), true, true, f64::EPSILON, max_iter).ok_or_else(|| {
        GeoError::NumericalFailure {
            module: module.to_owned(),
            reason: "SVD did not converge".into(),
        }
    })
}

/// Sign-normalized thin SVD. `module` names the weight in error messages.
pub fn svd(w: &DMatrix<f64>, module: &str) -> Result<SpectralBasis> {
    let dec = singular_decomposition(w, module)?;
    let (Some(mut u), Some(v_t)) = (dec.u, dec.v_t) else {
        return Err(GeoError::NumericalFailure {
            module: module.to_owned(),
            reason: "SVD factors missing".into(),
        });
    };
    let mut v = v_t.transpose();
    for i in 0..u.ncols() {
        let col = u.column(i);
        let mut pivot = 0;
        for (r, x) in col.iter().enumerate() {
            if x.abs() > col[pivot].abs() {
                pivot = r;
            }
        }
        if col[pivot] < 0.0 {
            u.column_mut(i).neg_mut();
            v.column_mut(i).neg_mut();
        }
    }
    Ok(SpectralBasis {
        u,
        sigma: dec.singular_values,
        v,
    })
}

/// Singular values only, descending.
pub fn singular_values(w: &DMatrix<f64>, module: &str) -> Result<DVector<f64>> {
    if w.is_empty() {
        return Err(GeoError::DegenerateInput(format!("SVD of zero-size matrix ({module})")));
    }
    let max_iter = 200 * w.nrows().max(w.ncols()).max(10);
    SVD::try_new(w.clone(), false, false, f64::EPSILON, max_iter)
        .map(|d| d.singular_values)
        .ok_or_else(|| GeoError::NumericalFailure {
            module: module.to_owned(),
            reason: "SVD did not converge".into(),
        })
}

/// A square matrix satisfying `R^T R = I` up to rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalMap(DMatrix<f64>);

impl OrthogonalMap {
    pub fn identity(d: usize) -> Self {
        OrthogonalMap(DMatrix::identity(d, d))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    /// `||R^T R - I||_F`
    pub fn orthogonality_residual(&self) -> f64 {
        let d = self.dim();
        (self.0.transpose() * &self.0 - DMatrix::<f64>::identity(d, d)).norm()
    }
}

/// Orthogonal `R` minimizing `||x1 R - x0||_F`, reflections included.
///
/// Closed form: with `x1^T x0 = U S V^T`, `R = U V^T`. Inputs are expected to
/// be column-centered already.
pub fn procrustes_rotation(x0: &DMatrix<f64>, x1: &DMatrix<f64>) -> Result<OrthogonalMap> {
    if x0.shape() != x1.shape() {
        return Err(GeoError::shape(
            "procrustes inputs",
            format!("{:?}", x0.shape()),
            format!("{:?}", x1.shape()),
        ));
    }
    if x0.ncols() == 0 || x0.nrows() < 2 {
        return Err(GeoError::DegenerateInput(format!(
            "procrustes needs n >= 2 and d >= 1, got {:?}",
            x0.shape()
        )));
    }
    let cross = x1.transpose() * x0;
    let dec = singular_decomposition(&cross, "procrustes")?;
    let (Some(u), Some(v_t)) = (dec.u, dec.v_t) else {
        return Err(GeoError::NumericalFailure {
            module: "procrustes".into(),
            reason: "SVD factors missing".into(),
        });
    };
    Ok(OrthogonalMap(u * v_t))
}

/// Cayley transform `R = (I + Q)(I - Q)^{-1}` of a skew-symmetric generator.
///
/// Solved as `(I - Q) R = (I + Q)` with a partially pivoted LU; the two
/// factors commute so this equals the right-inverse form.
pub fn cayley(q: &DMatrix<f64>) -> Result<OrthogonalMap> {
    if !q.is_square() || q.is_empty() {
        return Err(GeoError::shape(
            "cayley generator",
            "non-empty square matrix",
            format!("{:?}", q.shape()),
        ));
    }
    let worst = crate::tensorio::skew_violation(q);
    if worst > crate::tensorio::SKEW_TOLERANCE {
        return Err(GeoError::InvalidGenerator {
            module: "cayley".into(),
            max_asymmetry: worst,
        });
    }
    let d = q.nrows();
    let eye = DMatrix::<f64>::identity(d, d);
    let lhs = &eye - q;
    let rhs = &eye + q;
    let r = lhs.lu().solve(&rhs).ok_or_else(|| GeoError::NumericalFailure {
        module: "cayley".into(),
        reason: "I - Q is singular".into(),
    })?;
    if r.iter().any(|v| !v.is_finite()) {
        return Err(GeoError::NumericalFailure {
            module: "cayley".into(),
            reason: "non-finite rotation".into(),
        });
    }
    Ok(OrthogonalMap(r))
}

/// `exp(H(p))` with `p_i = sigma_i / sum(sigma)`; lies in `[1, min(rows, cols)]`.
pub fn effective_rank(m: &DMatrix<f64>) -> Result<f64> {
    let sigma = singular_values(m, "effective_rank")?;
    let total: f64 = sigma.iter().sum();
    if total <= 0.0 {
        return Err(GeoError::DegenerateInput("effective rank of an all-zero matrix".into()));
    }
    let entropy: f64 = sigma
        .iter()
        .map(|s| s / total)
        .filter(|p| *p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(entropy.exp())
}
