//! Weight-space diagnostics expressed in the pretrained singular basis.
//!
//! For `W0 = U S V^T` and an update `dW = W* - W0`:
//!
//! * retention  `|u_i^T dW v_i|` (change of the diagonal projection)
//! * adaptation `||dW v_i||_2` (update energy along input direction `v_i`)
//!
//! Both are summarized by a fluctuation score: the mean absolute deviation of
//! a profile from its reflect-padded centered moving average.

use nalgebra::DMatrix;

use crate::error::{GeoError, Result};
use crate::linalg::{effective_rank, svd, SpectralBasis};

pub const DEFAULT_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralProfile {
    pub module: String,
    pub retention: Vec<f64>,
    pub adaptation: Vec<f64>,
    pub retention_fluctuation: f64,
    pub adaptation_fluctuation: f64,
    pub window: usize,
    /// Index-matched right singular vector alignment, when requested.
    pub sva: Option<Vec<f64>>,
    /// Effective rank of `W* - W0`; zero when the update vanishes.
    pub effective_rank_delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvaProfile {
    pub module: String,
    pub alignment: Vec<f64>,
}

fn update(basis: &SpectralBasis, w0: &DMatrix<f64>, wstar: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if w0.shape() != wstar.shape() {
        return Err(GeoError::shape(
            "finetuned weight",
            format!("{:?}", w0.shape()),
            format!("{:?}", wstar.shape()),
        ));
    }
    if basis.u.nrows() != w0.nrows() || basis.v.nrows() != w0.ncols() {
        return Err(GeoError::shape(
            "spectral basis",
            format!("{:?}", w0.shape()),
            format!("({}, {})", basis.u.nrows(), basis.v.nrows()),
        ));
    }
    Ok(wstar - w0)
}

/// `|u_i^T (W* - W0) v_i|` for every singular index of `W0`.
pub fn retention_profile(
    basis: &SpectralBasis,
    w0: &DMatrix<f64>,
    wstar: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    let delta = update(basis, w0, wstar)?;
    let projected = &delta * &basis.v;
    Ok((0..basis.rank_bound())
        .map(|i| basis.u.column(i).dot(&projected.column(i)).abs())
        .collect())
}

/// `||(W* - W0) v_i||_2` for every singular index of `W0`.
pub fn adaptation_profile(
    basis: &SpectralBasis,
    w0: &DMatrix<f64>,
    wstar: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    let delta = update(basis, w0, wstar)?;
    let projected = &delta * &basis.v;
    Ok(projected.column_iter().map(|c| c.norm()).collect())
}

/// Moving average of `profile` over an odd `window`, after reflecting
/// `(window - 1) / 2` samples at each boundary without repeating the edge
/// sample (`d c b | a b c d | c b a`). Requires `profile.len() >= window`.
fn reflect_moving_average(profile: &[f64], window: usize) -> Vec<f64> {
    let n = profile.len() as isize;
    let radius = (window / 2) as isize;
    let at = |i: isize| -> f64 {
        let j = if i < 0 {
            -i
        } else if i >= n {
            2 * (n - 1) - i
        } else {
            i
        };
        profile[j as usize]
    };
    (0..n)
        .map(|i| (i - radius..=i + radius).map(at).sum::<f64>() / window as f64)
        .collect()
}

/// Mean absolute deviation of `profile` from its local moving average.
/// Profiles shorter than the window score zero.
pub fn fluctuation_score(profile: &[f64], window: usize) -> Result<f64> {
    if window == 0 || window % 2 == 0 {
        return Err(GeoError::InvalidConfig(format!(
            "fluctuation window must be odd and >= 1, got {window}"
        )));
    }
    if profile.len() < window {
        return Ok(0.0);
    }
    let smooth = reflect_moving_average(profile, window);
    let total: f64 = profile
        .iter()
        .zip(&smooth)
        .map(|(s, m)| (s - m).abs())
        .sum();
    Ok(total / profile.len() as f64)
}

/// Absolute cosine between index-matched right singular vectors.
///
/// Index matching assumes well-separated spectra; near-repeated singular
/// values can swap indices between the two bases.
pub fn sva_profile(
    module: &str,
    base: &SpectralBasis,
    finetuned: &SpectralBasis,
) -> Result<SvaProfile> {
    if base.v.shape() != finetuned.v.shape() {
        return Err(GeoError::shape(
            format!("sva bases for {module}"),
            format!("{:?}", base.v.shape()),
            format!("{:?}", finetuned.v.shape()),
        ));
    }
    let alignment = base
        .v
        .column_iter()
        .zip(finetuned.v.column_iter())
        .map(|(a, b)| a.dot(&b).abs().min(1.0))
        .collect();
    Ok(SvaProfile {
        module: module.to_owned(),
        alignment,
    })
}

/// Every weight-space diagnostic for one module.
pub fn spectral_profile(
    module: &str,
    w0: &DMatrix<f64>,
    wstar: &DMatrix<f64>,
    window: usize,
    with_sva: bool,
) -> Result<SpectralProfile> {
    let basis = svd(w0, module)?;
    let retention = retention_profile(&basis, w0, wstar)?;
    let adaptation = adaptation_profile(&basis, w0, wstar)?;
    let retention_fluctuation = fluctuation_score(&retention, window)?;
    let adaptation_fluctuation = fluctuation_score(&adaptation, window)?;
    let sva = if with_sva {
        let ft_basis = svd(wstar, module)?;
        Some(sva_profile(module, &basis, &ft_basis)?.alignment)
    } else {
        None
    };
    let delta = wstar - w0;
    let effective_rank_delta = if delta.iter().all(|v| *v == 0.0) {
        0.0
    } else {
        effective_rank(&delta)?
    };
    Ok(SpectralProfile {
        module: module.to_owned(),
        retention,
        adaptation,
        retention_fluctuation,
        adaptation_fluctuation,
        window,
        sva,
        effective_rank_delta,
    })
}
