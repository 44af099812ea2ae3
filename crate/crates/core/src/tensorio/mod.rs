//! Tensor files, checkpoint manifests and activation dumps.

mod manifest;
pub mod npy;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{GeoError, Result};

pub use manifest::{
    load_manifest, skew_violation, write_manifest, CheckpointManifest, LoraAdapter, ModuleEntry,
    ModuleKind, ModuleWeights, OftAdapter, Role, SKEW_TOLERANCE,
};

/// Row-major matrix of finite f64 values tagged with the module it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if data.len() != rows * cols {
            return Err(GeoError::shape(
                "dense matrix data",
                format!("{rows}x{cols} = {} values", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(GeoError::NonFiniteData {
                path: PathBuf::from(&name),
                index,
            });
        }
        Ok(Self {
            name,
            rows,
            cols,
            data,
        })
    }

    pub fn from_dmatrix(name: impl Into<String>, m: &DMatrix<f64>) -> Result<Self> {
        let data = m.transpose().as_slice().to_vec();
        Self::new(name, m.nrows(), m.ncols(), data)
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Row-major values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Load a 1-D or 2-D NPY tensor as a row-major f64 matrix. 1-D arrays become
/// a single row.
pub fn load_matrix(path: &Path) -> Result<DenseMatrix> {
    let array = npy::read_npy(path)?;
    let (rows, cols) = match array.shape.as_slice() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        dims => {
            return Err(GeoError::UnsupportedTensor {
                path: path.to_path_buf(),
                reason: format!("{}-d array (at most 2 dimensions)", dims.len()),
            })
        }
    };
    Ok(DenseMatrix {
        name: file_stem(path),
        rows,
        cols,
        data: array.data,
    })
}

/// Write a matrix as a 2-D `<f8` NPY file.
pub fn save_matrix(m: &DenseMatrix, path: &Path) -> Result<()> {
    if m.rows == 0 || m.cols == 0 {
        return Err(GeoError::UnsupportedTensor {
            path: path.to_path_buf(),
            reason: "zero-size matrix".into(),
        });
    }
    npy::write_npy_f64(path, &[m.rows, m.cols], &m.data)
}

pub(crate) fn save_dmatrix(m: &DMatrix<f64>, path: &Path) -> Result<()> {
    let dense = DenseMatrix::from_dmatrix(file_stem(path), m)?;
    save_matrix(&dense, path)
}

/// Load a stack of square blocks stored as `(n_blocks, b, b)`, or vertically
/// stacked as `(n_blocks * b, b)`.
pub fn load_block_stack(path: &Path) -> Result<Vec<DMatrix<f64>>> {
    let array = npy::read_npy(path)?;
    let (n_blocks, b) = match array.shape.as_slice() {
        [n, r, c] if r == c => (*n, *r),
        [rows, c] if rows % c == 0 => (rows / c, *c),
        dims => {
            return Err(GeoError::UnsupportedTensor {
                path: path.to_path_buf(),
                reason: format!("shape {dims:?} is not a stack of square blocks"),
            })
        }
    };
    Ok(array
        .data
        .chunks_exact(b * b)
        .take(n_blocks)
        .map(|chunk| DMatrix::from_row_slice(b, b, chunk))
        .collect())
}

/// Write square blocks as a `(n_blocks, b, b)` NPY array.
pub fn save_block_stack(blocks: &[DMatrix<f64>], path: &Path) -> Result<()> {
    let b = blocks.first().map(|m| m.nrows()).unwrap_or(0);
    let mut data = Vec::with_capacity(blocks.len() * b * b);
    for block in blocks {
        if block.nrows() != b || block.ncols() != b {
            return Err(GeoError::shape(
                "block stack",
                format!("{b}x{b}"),
                format!("{}x{}", block.nrows(), block.ncols()),
            ));
        }
        data.extend_from_slice(block.transpose().as_slice());
    }
    npy::write_npy_f64(path, &[blocks.len(), b, b], &data)
}

/// Which evaluation distribution an activation dump was collected on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Distribution {
    General,
    Target,
}

impl Distribution {
    pub fn as_str(self) -> &'static str {
        match self {
            Distribution::General => "general",
            Distribution::Target => "target",
        }
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Distribution {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "general" => Ok(Distribution::General),
            "target" => Ok(Distribution::Target),
            other => Err(GeoError::InvalidConfig(format!(
                "unknown distribution '{other}' (expected general or target)"
            ))),
        }
    }
}

/// An examples × features activation matrix for one module and distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    pub module_name: String,
    pub distribution: Distribution,
    pub data: DMatrix<f64>,
}

impl ActivationSet {
    pub fn new(
        module_name: impl Into<String>,
        distribution: Distribution,
        data: DMatrix<f64>,
    ) -> Result<Self> {
        if data.nrows() < 2 {
            return Err(GeoError::DegenerateInput(format!(
                "activation set needs at least 2 examples, got {}",
                data.nrows()
            )));
        }
        Ok(Self {
            module_name: module_name.into(),
            distribution,
            data,
        })
    }

    pub fn examples(&self) -> usize {
        self.data.nrows()
    }

    pub fn features(&self) -> usize {
        self.data.ncols()
    }
}

/// Parsed `<module>__<distribution>__<role>.npy` file name.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ActivationKey {
    pub module: String,
    pub distribution: Distribution,
    pub role: String,
}

impl ActivationKey {
    pub fn file_name(&self) -> String {
        format!("{}__{}__{}.npy", self.module, self.distribution, self.role)
    }

    pub fn parse(file_name: &str) -> Option<Self> {
        let stem = file_name.strip_suffix(".npy")?;
        let mut parts = stem.rsplitn(3, "__");
        let role = parts.next()?;
        let distribution = parts.next()?.parse().ok()?;
        let module = parts.next()?;
        if module.is_empty() || role.is_empty() {
            return None;
        }
        Some(Self {
            module: module.to_owned(),
            distribution,
            role: role.to_owned(),
        })
    }
}

/// List activation dumps in a directory, sorted by (module, distribution, role).
/// Files that do not follow the naming convention are ignored.
pub fn scan_activation_dir(dir: &Path) -> Result<Vec<(ActivationKey, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| GeoError::io(dir, e))?;
    let mut found = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| GeoError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(key) = ActivationKey::parse(&name) {
            found.push((key, entry.path()));
        }
    }
    found.sort();
    Ok(found)
}

pub fn load_activations(path: &Path, key: &ActivationKey) -> Result<ActivationSet> {
    let m = load_matrix(path)?;
    ActivationSet::new(key.module.clone(), key.distribution, m.to_dmatrix())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_names_round_trip() {
        let key = ActivationKey {
            module: "layers.18.mlp.down_proj".into(),
            distribution: Distribution::Target,
            role: "finetuned".into(),
        };
        let name = key.file_name();
        assert_eq!(name, "layers.18.mlp.down_proj__target__finetuned.npy");
        assert_eq!(ActivationKey::parse(&name), Some(key));
        assert_eq!(ActivationKey::parse("weights.npy"), None);
        assert_eq!(ActivationKey::parse("m__other__base.npy"), None);
    }

    #[test]
    fn dense_matrix_rejects_bad_length() {
        assert!(DenseMatrix::new("m", 2, 2, vec![1.0; 3]).is_err());
        assert!(DenseMatrix::new("m", 1, 2, vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn dmatrix_conversion_is_row_major() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let d = DenseMatrix::from_dmatrix("m", &m).unwrap();
        assert_eq!(d.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(d.to_dmatrix(), m);
    }

    #[test]
    fn activation_set_needs_two_rows() {
        let one = DMatrix::zeros(1, 3);
        assert!(matches!(
            ActivationSet::new("m", Distribution::General, one),
            Err(GeoError::DegenerateInput(_))
        ));
    }
}
