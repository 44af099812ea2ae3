//! Capability-conditioned spectral drift (CSD): how much an update moves a
//! module's output on the inputs a data distribution actually produces.

use nalgebra::DMatrix;

use crate::error::{GeoError, Result};
use crate::tensorio::{ActivationSet, Distribution};

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    pub module: String,
    pub distribution: Distribution,
    /// `E ||dW h||^2`
    pub csd_abs: f64,
    /// `E ||dW h||^2 / (E ||W0 h||^2 + eps)`
    pub csd_rel: f64,
    /// `E ||dW h||^2 / ((||dW||_F^2 + eps)(E ||h||^2 + eps))`
    pub csd_un: f64,
    /// `E [ ||dW h||^2 / (||W0 h||^2 + eps) ]`
    pub csd_rel_pointwise: f64,
    pub n_examples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftRatio {
    pub module: String,
    pub ratio_rel: f64,
    pub ratio_un: f64,
}

/// Drift of `W*` against `W0` over pretrained-model input activations
/// (rows of `acts`).
pub fn csd(
    w0: &DMatrix<f64>,
    wstar: &DMatrix<f64>,
    acts: &ActivationSet,
    epsilon: f64,
) -> Result<DriftReport> {
    if !(epsilon > 0.0) {
        return Err(GeoError::InvalidConfig(format!("epsilon must be > 0, got {epsilon}")));
    }
    if w0.shape() != wstar.shape() {
        return Err(GeoError::shape(
            format!("finetuned weight for {}", acts.module_name),
            format!("{:?}", w0.shape()),
            format!("{:?}", wstar.shape()),
        ));
    }
    if acts.features() != w0.ncols() {
        return Err(GeoError::shape(
            format!("activations for {}", acts.module_name),
            format!("{} features (in_dim)", w0.ncols()),
            format!("{} features", acts.features()),
        ));
    }
    let n = acts.examples();
    if n == 0 {
        return Err(GeoError::DegenerateInput("empty activation set".into()));
    }
    let delta = wstar - w0;
    let h = &acts.data;
    // rows of h are examples, so outputs are h W^T
    let moved = h * delta.transpose();
    let base_out = h * w0.transpose();

    let mut sum_moved = 0.0;
    let mut sum_base = 0.0;
    let mut sum_input = 0.0;
    let mut sum_ratio = 0.0;
    for i in 0..n {
        let m = moved.row(i).norm_squared();
        let b = base_out.row(i).norm_squared();
        sum_moved += m;
        sum_base += b;
        sum_input += h.row(i).norm_squared();
        sum_ratio += m / (b + epsilon);
    }
    let nf = n as f64;
    let mean_moved = sum_moved / nf;
    let mean_base = sum_base / nf;
    let mean_input = sum_input / nf;
    Ok(DriftReport {
        module: acts.module_name.clone(),
        distribution: acts.distribution,
        csd_abs: mean_moved,
        csd_rel: mean_moved / (mean_base + epsilon),
        csd_un: mean_moved / ((delta.norm_squared() + epsilon) * (mean_input + epsilon)),
        csd_rel_pointwise: sum_ratio / nf,
        n_examples: n,
    })
}

/// General-to-target ratios `csd_G / (csd_T + eps)` for the relative and
/// update-normalized forms.
pub fn drift_ratio(general: &DriftReport, target: &DriftReport, epsilon: f64) -> Result<DriftRatio> {
    if general.module != target.module {
        return Err(GeoError::InvalidPairing(format!(
            "drift reports for different modules: {} vs {}",
            general.module, target.module
        )));
    }
    Ok(DriftRatio {
        module: general.module.clone(),
        ratio_rel: general.csd_rel / (target.csd_rel + epsilon),
        ratio_un: general.csd_un / (target.csd_un + epsilon),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn acts(rows: &[&[f64]], dist: Distribution) -> ActivationSet {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        ActivationSet::new("m", dist, DMatrix::from_row_slice(rows.len(), d, &flat)).unwrap()
    }

    #[test]
    fn no_update_no_drift() {
        let w0 = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let a = acts(&[&[1.0, 0.5], &[-1.0, 2.0]], Distribution::General);
        let r = csd(&w0, &w0, &a, DEFAULT_EPSILON).unwrap();
        assert_eq!((r.csd_abs, r.csd_rel, r.csd_un), (0.0, 0.0, 0.0));
    }

    #[test]
    fn self_ratio_tends_to_one() {
        let w0 = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let ws = &w0 * 2.0;
        let a = acts(&[&[1.0, 0.5], &[-1.0, 2.0]], Distribution::General);
        let r = csd(&w0, &ws, &a, 1e-15).unwrap();
        assert_relative_eq!(r.csd_rel, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn two_row_hand_computation() {
        let eps = DEFAULT_EPSILON;
        let w0 = DMatrix::<f64>::identity(2, 2);
        let ws = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let a = acts(&[&[1.0, 0.0], &[0.0, 1.0]], Distribution::General);
        let r = csd(&w0, &ws, &a, eps).unwrap();
        assert_eq!(r.csd_abs, 0.5);
        assert_eq!(r.csd_rel, 0.5 / (1.0 + eps));
        assert_eq!(r.csd_un, 0.5 / ((1.0 + eps) * (1.0 + eps)));
        assert_eq!(r.n_examples, 2);
    }

    #[test]
    fn feature_mismatch() {
        let w0 = DMatrix::<f64>::identity(2, 3);
        let a = acts(&[&[1.0, 0.0], &[0.0, 1.0]], Distribution::General);
        assert!(matches!(
            csd(&w0, &w0, &a, DEFAULT_EPSILON),
            Err(GeoError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn ratios() {
        let w0 = DMatrix::<f64>::identity(2, 2);
        let ws = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let g = csd(&w0, &ws, &acts(&[&[1.0, 0.0], &[0.0, 1.0]], Distribution::General), 1e-12).unwrap();
        let same = drift_ratio(&g, &g, 1e-12).unwrap();
        assert_relative_eq!(same.ratio_rel, 1.0, max_relative = 1e-10);

        // target only excites the untouched input direction half as often
        let t = csd(
            &w0,
            &ws,
            &acts(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0], &[0.0, 1.0]], Distribution::Target),
            1e-12,
        )
        .unwrap();
        // general: 0.5 / 1; target: 0.25 / 1
        let r = drift_ratio(&g, &t, 1e-12).unwrap();
        assert_relative_eq!(r.ratio_rel, 2.0, max_relative = 1e-10);
        assert_relative_eq!(r.ratio_un, 2.0, max_relative = 1e-10);

        let mut other = t.clone();
        other.module = "x".into();
        assert!(matches!(
            drift_ratio(&g, &other, 1e-12),
            Err(GeoError::InvalidPairing(_))
        ));
    }

    #[test]
    fn null_example_lowers_absolute_drift() {
        let w0 = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let ws = DMatrix::from_row_slice(2, 3, &[1.5, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let a = acts(&[&[1.0, 1.0, 0.0], &[2.0, -1.0, 0.0]], Distribution::General);
        let b = acts(&[&[1.0, 1.0, 0.0], &[2.0, -1.0, 0.0], &[0.0, 0.0, 3.0]], Distribution::General);
        let ra = csd(&w0, &ws, &a, 1e-12).unwrap();
        let rb = csd(&w0, &ws, &b, 1e-12).unwrap();
        assert!(rb.csd_abs < ra.csd_abs);
        assert_relative_eq!(rb.csd_rel, ra.csd_rel, max_relative = 1e-10);
    }
}
