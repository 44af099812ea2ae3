//! Geometry diagnostics for parameter-efficient finetuning updates.
//!
//! * [`tensorio`]: NPY tensors, checkpoint manifests, activation dumps
//! * [`linalg`]: SVD, Procrustes, Cayley transform, effective rank
//! * [`spectral`]: retention / adaptation profiles, fluctuation, SVA
//! * [`drift`]: capability-conditioned spectral drift
//! * [`actgeom`]: Procrustes residual, linear CKA, Gram distortion
//! * [`pathwise`]: merging, interpolation, rewinding, sweeps
//! * [`stats`]: Pearson / Spearman correlation tables

pub mod actgeom;
pub mod drift;
pub mod error;
pub mod fixture;
pub mod linalg;
pub mod pathwise;
pub mod report;
pub mod spectral;
pub mod stats;
pub mod synth;
pub mod tensorio;

pub use error::{GeoError, Result};
