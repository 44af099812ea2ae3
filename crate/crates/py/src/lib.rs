//! Python bindings. Matrices cross the boundary as lists of rows (any
//! sequence of float sequences, including 2-D numpy arrays, is accepted).

use std::path::PathBuf;

use geoscope_core::report::Json;
use geoscope_core::tensorio::{self, ActivationSet, CheckpointManifest, DenseMatrix, Distribution};
use geoscope_core::tensorio::{LoraAdapter, ModuleWeights, OftAdapter};
use geoscope_core::{actgeom, drift, fixture, linalg, pathwise, spectral, stats, GeoError};
use nalgebra::DMatrix;
use pyo3::create_exception;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(geoscope, GeoscopeError, PyValueError, "Invalid input or numerical failure.");

type Rows = Vec<Vec<f64>>;

fn err(e: GeoError) -> PyErr {
    match e {
        GeoError::Io { .. } => PyOSError::new_err(e.to_string()),
        other => GeoscopeError::new_err(other.to_string()),
    }
}

fn to_matrix(rows: &Rows, what: &str) -> PyResult<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 {
        return Err(GeoscopeError::new_err(format!("{what} must be a non-empty matrix")));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != cols) {
        return Err(GeoscopeError::new_err(format!(
            "{what} is ragged: row {i} has {} values, row 0 has {cols}",
            rows[i].len()
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn to_rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn json_to_py<'py>(py: Python<'py>, value: &Json) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (value.to_pretty(),))
}

/// Checkpoint or adapter manifest with its tensors loaded.
#[pyclass(name = "Manifest", module = "geoscope", frozen)]
struct PyManifest {
    inner: CheckpointManifest,
}

#[pymethods]
impl PyManifest {
    /// Load and validate a manifest JSON file and every tensor it names.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = tensorio::load_manifest(&path).map_err(err)?;
        Ok(Self { inner })
    }

    /// Write `manifest.json` and tensors into `directory`; returns the manifest path.
    fn save(&self, directory: PathBuf) -> PyResult<PathBuf> {
        tensorio::write_manifest(&self.inner, &directory).map_err(err)
    }

    #[getter]
    fn model_id(&self) -> &str {
        &self.inner.model_id
    }

    #[getter]
    fn role(&self) -> String {
        self.inner.role.to_string()
    }

    fn module_names(&self) -> Vec<String> {
        self.inner.module_names().into_iter().map(str::to_owned).collect()
    }

    /// Module kind: "dense", "lora" or "oft".
    fn kind(&self, module: &str) -> PyResult<String> {
        Ok(self.entry(module)?.kind().to_string())
    }

    fn layer_index(&self, module: &str) -> PyResult<usize> {
        Ok(self.entry(module)?.layer_index)
    }

    /// Dense weight of a module.
    fn weight(&self, module: &str) -> PyResult<Rows> {
        let entry = self.entry(module)?;
        entry
            .dense()
            .map(to_rows)
            .ok_or_else(|| GeoscopeError::new_err(format!("module {module} is not dense")))
    }

    /// Per-layer adapter strengths as dicts ordered by layer.
    fn layer_strengths<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        pathwise::layer_strengths(&self.inner)
            .map_err(err)?
            .into_iter()
            .map(|s| {
                let d = PyDict::new(py);
                d.set_item("layer", s.layer_index)?;
                d.set_item("strength", s.strength)?;
                d.set_item("modules", s.modules)?;
                d.set_item("rotation_strength", s.rotation_strength)?;
                Ok(d)
            })
            .collect()
    }

    /// Rescale adapter layers with a policy string such as "safescale:5",
    /// "minscale" or "uniform:0.5". Returns the new adapter and the report.
    fn rewind<'py>(&self, py: Python<'py>, policy: &str) -> PyResult<(PyManifest, Bound<'py, PyAny>)> {
        let policy: pathwise::RewindPolicy = policy.parse().map_err(err)?;
        let (inner, report) = pathwise::rewind(&self.inner, policy).map_err(err)?;
        Ok((PyManifest { inner }, json_to_py(py, &report.to_json())?))
    }

    fn __len__(&self) -> usize {
        self.inner.modules.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Manifest(model_id={:?}, role={}, modules={})",
            self.inner.model_id,
            self.inner.role,
            self.inner.modules.len()
        )
    }
}

impl PyManifest {
    fn entry(&self, module: &str) -> PyResult<&tensorio::ModuleEntry> {
        self.inner
            .module(module)
            .ok_or_else(|| GeoscopeError::new_err(format!("no module named {module}")))
    }
}

/// Read a float32/float64 NPY file as rows (1-D arrays become one row).
#[pyfunction]
fn read_npy(path: PathBuf) -> PyResult<Rows> {
    Ok(to_rows(&tensorio::load_matrix(&path).map_err(err)?.to_dmatrix()))
}

/// Write rows as a float64 NPY file.
#[pyfunction]
fn write_npy(path: PathBuf, matrix: Rows) -> PyResult<()> {
    let m = DenseMatrix::from_dmatrix("array", &to_matrix(&matrix, "matrix")?).map_err(err)?;
    tensorio::save_matrix(&m, &path).map_err(err)
}

/// Thin SVD `(U, sigma, V)` with `W = U diag(sigma) V^T`.
#[pyfunction]
fn svd(w: Rows) -> PyResult<(Rows, Vec<f64>, Rows)> {
    let b = linalg::svd(&to_matrix(&w, "w")?, "w").map_err(err)?;
    Ok((to_rows(&b.u), b.sigma.iter().copied().collect(), to_rows(&b.v)))
}

#[pyfunction]
fn singular_values(w: Rows) -> PyResult<Vec<f64>> {
    Ok(linalg::singular_values(&to_matrix(&w, "w")?, "w")
        .map_err(err)?
        .iter()
        .copied()
        .collect())
}

/// `(I + Q)(I - Q)^-1` for skew-symmetric `Q`.
#[pyfunction]
fn cayley(q: Rows) -> PyResult<Rows> {
    Ok(to_rows(linalg::cayley(&to_matrix(&q, "q")?).map_err(err)?.matrix()))
}

/// Orthogonal `R` minimizing `||X1 R - X0||_F`.
#[pyfunction]
fn procrustes_rotation(x0: Rows, x1: Rows) -> PyResult<Rows> {
    let r = linalg::procrustes_rotation(&to_matrix(&x0, "x0")?, &to_matrix(&x1, "x1")?).map_err(err)?;
    Ok(to_rows(r.matrix()))
}

#[pyfunction]
fn effective_rank(m: Rows) -> PyResult<f64> {
    linalg::effective_rank(&to_matrix(&m, "m")?).map_err(err)
}

fn profiles(w0: &Rows, wstar: &Rows) -> PyResult<(DMatrix<f64>, DMatrix<f64>, linalg::SpectralBasis)> {
    let w0 = to_matrix(w0, "w0")?;
    let wstar = to_matrix(wstar, "wstar")?;
    let basis = linalg::svd(&w0, "w0").map_err(err)?;
    Ok((w0, wstar, basis))
}

#[pyfunction]
fn retention_profile(w0: Rows, wstar: Rows) -> PyResult<Vec<f64>> {
    let (w0, wstar, basis) = profiles(&w0, &wstar)?;
    spectral::retention_profile(&basis, &w0, &wstar).map_err(err)
}

#[pyfunction]
fn adaptation_profile(w0: Rows, wstar: Rows) -> PyResult<Vec<f64>> {
    let (w0, wstar, basis) = profiles(&w0, &wstar)?;
    spectral::adaptation_profile(&basis, &w0, &wstar).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (profile, window = spectral::DEFAULT_WINDOW))]
fn fluctuation_score(profile: Vec<f64>, window: usize) -> PyResult<f64> {
    spectral::fluctuation_score(&profile, window).map_err(err)
}

/// Every weight-space diagnostic for one module, as a dict.
#[pyfunction]
#[pyo3(signature = (w0, wstar, window = spectral::DEFAULT_WINDOW, sva = false))]
fn spectral_profile<'py>(
    py: Python<'py>,
    w0: Rows,
    wstar: Rows,
    window: usize,
    sva: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let p = spectral::spectral_profile("module", &to_matrix(&w0, "w0")?, &to_matrix(&wstar, "wstar")?, window, sva)
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("retention", p.retention)?;
    d.set_item("adaptation", p.adaptation)?;
    d.set_item("retention_fluctuation", p.retention_fluctuation)?;
    d.set_item("adaptation_fluctuation", p.adaptation_fluctuation)?;
    d.set_item("effective_rank_delta", p.effective_rank_delta)?;
    d.set_item("window", p.window)?;
    d.set_item("sva", p.sva)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (x0, x1, epsilon = actgeom::DEFAULT_EPSILON))]
fn procrustes_residual(x0: Rows, x1: Rows, epsilon: f64) -> PyResult<f64> {
    actgeom::procrustes_residual(&to_matrix(&x0, "x0")?, &to_matrix(&x1, "x1")?, epsilon).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (x0, x1, epsilon = actgeom::DEFAULT_EPSILON))]
fn linear_cka(x0: Rows, x1: Rows, epsilon: f64) -> PyResult<f64> {
    actgeom::linear_cka(&to_matrix(&x0, "x0")?, &to_matrix(&x1, "x1")?, epsilon).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (x0, x1, epsilon = actgeom::DEFAULT_EPSILON))]
fn gram_distortion(x0: Rows, x1: Rows, epsilon: f64) -> PyResult<f64> {
    actgeom::gram_distortion(&to_matrix(&x0, "x0")?, &to_matrix(&x1, "x1")?, epsilon).map_err(err)
}

/// Procrustes residual, Gram distortion, CKA and controls for two dumps.
#[pyfunction]
#[pyo3(signature = (x0, x1, epsilon = actgeom::DEFAULT_EPSILON))]
fn compare_activations<'py>(py: Python<'py>, x0: Rows, x1: Rows, epsilon: f64) -> PyResult<Bound<'py, PyDict>> {
    let r = actgeom::compare(
        "module",
        Distribution::General,
        &to_matrix(&x0, "x0")?,
        &to_matrix(&x1, "x1")?,
        epsilon,
    )
    .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("proc", r.procrustes_residual)?;
    d.set_item("gram", r.gram_distortion)?;
    d.set_item("cka", r.cka)?;
    d.set_item("raw_residual", r.raw_residual)?;
    d.set_item("n", r.n_examples)?;
    d.set_item("dropped_rows", r.dropped_rows)?;
    Ok(d)
}

/// Spectral drift of `wstar` against `w0` over input rows `acts`.
#[pyfunction]
#[pyo3(signature = (w0, wstar, acts, epsilon = drift::DEFAULT_EPSILON))]
fn csd<'py>(py: Python<'py>, w0: Rows, wstar: Rows, acts: Rows, epsilon: f64) -> PyResult<Bound<'py, PyDict>> {
    let acts = ActivationSet::new("module", Distribution::General, to_matrix(&acts, "acts")?).map_err(err)?;
    let r = drift::csd(&to_matrix(&w0, "w0")?, &to_matrix(&wstar, "wstar")?, &acts, epsilon).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("csd_abs", r.csd_abs)?;
    d.set_item("csd_rel", r.csd_rel)?;
    d.set_item("csd_un", r.csd_un)?;
    d.set_item("csd_rel_pointwise", r.csd_rel_pointwise)?;
    d.set_item("n", r.n_examples)?;
    Ok(d)
}

/// `W0 + scale * B A`.
#[pyfunction]
fn merge_lora(w0: Rows, a: Rows, b: Rows, scale: f64) -> PyResult<Rows> {
    let lora = LoraAdapter {
        a: to_matrix(&a, "a")?,
        b: to_matrix(&b, "b")?,
        scale,
    };
    Ok(to_rows(&pathwise::merge_lora(&to_matrix(&w0, "w0")?, &lora).map_err(err)?))
}

fn oft_from(blocks: &[Rows]) -> PyResult<OftAdapter> {
    let blocks = blocks
        .iter()
        .map(|q| to_matrix(q, "oft block"))
        .collect::<PyResult<Vec<_>>>()?;
    let block_size = blocks.first().map_or(0, DMatrix::nrows);
    Ok(OftAdapter { block_size, blocks })
}

/// `W0 blockdiag(cayley(Q_1), ..., cayley(Q_m))`.
#[pyfunction]
fn merge_oft(w0: Rows, blocks: Vec<Rows>) -> PyResult<Rows> {
    let oft = oft_from(&blocks)?;
    Ok(to_rows(&pathwise::merge_oft(&to_matrix(&w0, "w0")?, &oft).map_err(err)?))
}

/// One point on an interpolation path for a single module. Pass `lora=(a, b,
/// scale)` or `oft=[blocks]`; `path` is "delta", "lora_factor" or "cayley".
#[pyfunction]
#[pyo3(signature = (w0, path, alpha, lora = None, oft = None))]
fn interpolate_weight(
    w0: Rows,
    path: &str,
    alpha: f64,
    lora: Option<(Rows, Rows, f64)>,
    oft: Option<Vec<Rows>>,
) -> PyResult<Rows> {
    let kind: pathwise::PathKind = path.parse().map_err(err)?;
    let target = match (lora, oft) {
        (Some((a, b, scale)), None) => ModuleWeights::Lora(LoraAdapter {
            a: to_matrix(&a, "a")?,
            b: to_matrix(&b, "b")?,
            scale,
        }),
        (None, Some(blocks)) => ModuleWeights::Oft(oft_from(&blocks)?),
        _ => return Err(GeoscopeError::new_err("pass exactly one of lora= or oft=")),
    };
    let w = pathwise::interpolate(&to_matrix(&w0, "w0")?, &target, kind, alpha).map_err(err)?;
    Ok(to_rows(&w))
}

/// Merged dense checkpoint at `alpha` along `path`.
#[pyfunction]
fn interpolate(base: &PyManifest, adapter: &PyManifest, path: &str, alpha: f64) -> PyResult<PyManifest> {
    let kind: pathwise::PathKind = path.parse().map_err(err)?;
    let inner = pathwise::interpolate_checkpoint(&base.inner, &adapter.inner, kind, alpha).map_err(err)?;
    Ok(PyManifest { inner })
}

/// Write one merged checkpoint per alpha plus `sweep_index.json`; returns the index.
#[pyfunction]
fn sweep<'py>(
    py: Python<'py>,
    base: &PyManifest,
    adapter: &PyManifest,
    path: &str,
    alphas: Vec<f64>,
    out_dir: PathBuf,
) -> PyResult<Bound<'py, PyAny>> {
    let kind: pathwise::PathKind = path.parse().map_err(err)?;
    let spec = pathwise::PathSpec::new(kind, alphas).map_err(err)?;
    let index = pathwise::sweep(&base.inner, &adapter.inner, &spec, &out_dir).map_err(err)?;
    json_to_py(py, &index.to_json())
}

#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    stats::pearson(&x, &y).map_err(err)
}

/// Spearman rank correlation with mean-rank ties; returns `(rho, p)`.
#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<(f64, f64)> {
    stats::spearman(&x, &y).map_err(err)
}

/// Correlate every metric column of one CSV with every column of another.
#[pyfunction]
fn correlate_table<'py>(
    py: Python<'py>,
    internal: PathBuf,
    external: PathBuf,
    key: &str,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    stats::correlate_table(&internal, &external, key)
        .map_err(err)?
        .into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("metric", r.metric_a)?;
            d.set_item("external_metric", r.metric_b)?;
            d.set_item("pearson", r.pearson)?;
            d.set_item("spearman", r.spearman)?;
            d.set_item("spearman_p", r.spearman_p)?;
            d.set_item("n", r.n)?;
            d.set_item("dropped", r.dropped)?;
            Ok(d)
        })
        .collect()
}

/// Write the seeded toy fixture into `out_dir`.
#[pyfunction]
#[pyo3(signature = (out_dir, seed = fixture::TOY_SEED))]
fn write_fixture(out_dir: PathBuf, seed: u64) -> PyResult<()> {
    fixture::write_fixture(&out_dir, seed).map_err(err)
}

#[pymodule]
fn geoscope(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("GeoscopeError", m.py().get_type::<GeoscopeError>())?;
    m.add_class::<PyManifest>()?;
    m.add_function(wrap_pyfunction!(read_npy, m)?)?;
    m.add_function(wrap_pyfunction!(write_npy, m)?)?;
    m.add_function(wrap_pyfunction!(svd, m)?)?;
    m.add_function(wrap_pyfunction!(singular_values, m)?)?;
    m.add_function(wrap_pyfunction!(cayley, m)?)?;
    m.add_function(wrap_pyfunction!(procrustes_rotation, m)?)?;
    m.add_function(wrap_pyfunction!(effective_rank, m)?)?;
    m.add_function(wrap_pyfunction!(retention_profile, m)?)?;
    m.add_function(wrap_pyfunction!(adaptation_profile, m)?)?;
    m.add_function(wrap_pyfunction!(fluctuation_score, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_profile, m)?)?;
    m.add_function(wrap_pyfunction!(procrustes_residual, m)?)?;
    m.add_function(wrap_pyfunction!(linear_cka, m)?)?;
    m.add_function(wrap_pyfunction!(gram_distortion, m)?)?;
    m.add_function(wrap_pyfunction!(compare_activations, m)?)?;
    m.add_function(wrap_pyfunction!(csd, m)?)?;
    m.add_function(wrap_pyfunction!(merge_lora, m)?)?;
    m.add_function(wrap_pyfunction!(merge_oft, m)?)?;
    m.add_function(wrap_pyfunction!(interpolate_weight, m)?)?;
    m.add_function(wrap_pyfunction!(interpolate, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(correlate_table, m)?)?;
    m.add_function(wrap_pyfunction!(write_fixture, m)?)?;
    Ok(())
}
