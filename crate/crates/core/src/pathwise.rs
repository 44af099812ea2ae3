//! Adapter merging, parameterization-aware interpolation, and layer-wise
//! rewinding.
//!
//! Interpolation paths:
//!
//! * `delta`            `W(a) = W0 + a (W* - W0)`
//! * `lora_factor`      both factors scaled by `sqrt(a)`, net `W0 + a s B A`
//! * `cayley_generator` `W(a) = W0 blockdiag(cayley(sqrt(a) Q_j))`
//!
//! OFT is right-multiplicative: `W* = W0 R`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{GeoError, Result};
use crate::linalg::{cayley, singular_values};
use crate::report::Json;
use crate::tensorio::{
    npy, skew_violation, write_manifest, CheckpointManifest, LoraAdapter, ModuleEntry, ModuleWeights,
    OftAdapter, Role, SKEW_TOLERANCE,
};

pub const DEFAULT_REFERENCE_LAYERS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathKind {
    Delta,
    LoraFactor,
    CayleyGenerator,
}

impl PathKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PathKind::Delta => "delta",
            PathKind::LoraFactor => "lora_factor",
            PathKind::CayleyGenerator => "cayley_generator",
        }
    }
}

impl FromStr for PathKind {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delta" => Ok(PathKind::Delta),
            "lora" | "lora_factor" => Ok(PathKind::LoraFactor),
            "cayley" | "cayley_generator" => Ok(PathKind::CayleyGenerator),
            other => Err(GeoError::InvalidConfig(format!(
                "unknown path kind '{other}' (expected delta, lora or cayley)"
            ))),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(GeoError::InvalidConfig(format!(
            "interpolation coefficient {alpha} outside [0, 1]"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathSpec {
    kind: PathKind,
    alphas: Vec<f64>,
}

impl PathSpec {
    /// Alphas must lie in `[0, 1]` and be sorted ascending; nothing is clamped.
    pub fn new(kind: PathKind, alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(GeoError::InvalidConfig("empty alpha grid".into()));
        }
        for &a in &alphas {
            check_alpha(a)?;
        }
        if alphas.windows(2).any(|w| w[0] > w[1]) {
            return Err(GeoError::InvalidConfig(format!(
                "alpha grid must be sorted ascending: {alphas:?}"
            )));
        }
        Ok(Self { kind, alphas })
    }

    pub fn kind(&self) -> PathKind {
        self.kind
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RewindPolicy {
    Uniform(f64),
    SafeScale { reference_layers: usize },
    MinScale,
}

impl fmt::Display for RewindPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RewindPolicy::Uniform(a) => write!(f, "uniform:{a}"),
            RewindPolicy::SafeScale { reference_layers } => write!(f, "safescale:{reference_layers}"),
            RewindPolicy::MinScale => f.write_str("minscale"),
        }
    }
}

impl FromStr for RewindPolicy {
    type Err = GeoError;

    /// `uniform:<a>`, `safescale[:<k>]` or `minscale`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let bad = || GeoError::InvalidConfig(format!("invalid rewind policy '{s}'"));
        match (name, arg) {
            ("uniform", Some(a)) => {
                let alpha: f64 = a.parse().map_err(|_| bad())?;
                check_alpha(alpha)?;
                Ok(RewindPolicy::Uniform(alpha))
            }
            ("safescale", None) => Ok(RewindPolicy::SafeScale {
                reference_layers: DEFAULT_REFERENCE_LAYERS,
            }),
            ("safescale", Some(k)) => {
                let k: usize = k.parse().map_err(|_| bad())?;
                if k == 0 {
                    return Err(GeoError::InvalidConfig(
                        "safescale needs at least one reference layer".into(),
                    ));
                }
                Ok(RewindPolicy::SafeScale { reference_layers: k })
            }
            ("minscale", None) => Ok(RewindPolicy::MinScale),
            _ => Err(bad()),
        }
    }
}

/// Mean update strength of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStrength {
    pub layer_index: usize,
    /// Mean over the layer's modules of `||Q||_F^2` (OFT) or `||s B A||_F^2`.
    pub strength: f64,
    pub modules: usize,
    /// Mean over OFT blocks of `1 - cos(2 atan(sigma_max(Q_block)))`; debug only.
    pub rotation_strength: Option<f64>,
}

fn conformable(context: &str, expected: (usize, usize), found: (usize, usize)) -> Result<()> {
    if expected != found {
        return Err(GeoError::shape(context, format!("{expected:?}"), format!("{found:?}")));
    }
    Ok(())
}

/// `W0 + s B A`.
pub fn merge_lora(w0: &DMatrix<f64>, lora: &LoraAdapter) -> Result<DMatrix<f64>> {
    let rank = lora.a.nrows();
    conformable("lora A", (rank, w0.ncols()), lora.a.shape())?;
    conformable("lora B", (w0.nrows(), rank), lora.b.shape())?;
    if !(lora.scale > 0.0) {
        return Err(GeoError::InvalidConfig(format!("lora scale must be > 0, got {}", lora.scale)));
    }
    Ok(w0 + lora.delta())
}

fn check_blocks(w0: &DMatrix<f64>, oft: &OftAdapter) -> Result<()> {
    let b = oft.block_size;
    if b == 0 || oft.blocks.len() * b != w0.ncols() {
        return Err(GeoError::shape(
            "oft block layout",
            format!("blocks covering in_dim {}", w0.ncols()),
            format!("{} blocks of size {b}", oft.blocks.len()),
        ));
    }
    for q in &oft.blocks {
        conformable("oft block", (b, b), q.shape())?;
        let worst = skew_violation(q);
        if worst > SKEW_TOLERANCE {
            return Err(GeoError::InvalidGenerator {
                module: "oft".into(),
                max_asymmetry: worst,
            });
        }
    }
    Ok(())
}

/// `W0 blockdiag(cayley(c Q_1), ..., cayley(c Q_m))` for generator scale `c`.
fn rotate_blocks(w0: &DMatrix<f64>, oft: &OftAdapter, generator_scale: f64) -> Result<DMatrix<f64>> {
    check_blocks(w0, oft)?;
    let b = oft.block_size;
    let mut out = w0.clone();
    for (j, q) in oft.blocks.iter().enumerate() {
        let r = cayley(&(q * generator_scale))?;
        let cols = w0.columns(j * b, b) * r.matrix();
        out.columns_mut(j * b, b).copy_from(&cols);
    }
    Ok(out)
}

/// `W0 R` with `R` block-diagonal from per-block Cayley transforms.
pub fn merge_oft(w0: &DMatrix<f64>, oft: &OftAdapter) -> Result<DMatrix<f64>> {
    rotate_blocks(w0, oft, 1.0)
}

/// Effective finetuned weight for one module: dense weights pass through,
/// adapters are merged into `w0`.
pub fn merge_module(w0: &DMatrix<f64>, weights: &ModuleWeights) -> Result<DMatrix<f64>> {
    match weights {
        ModuleWeights::Dense(w) => {
            conformable("finetuned weight", w0.shape(), w.shape())?;
            Ok(w.clone())
        }
        ModuleWeights::Lora(l) => merge_lora(w0, l),
        ModuleWeights::Oft(o) => merge_oft(w0, o),
    }
}

/// Point `alpha` on the chosen path from `w0` towards `target`.
///
/// `alpha = 0` returns `w0` unchanged and `alpha = 1` returns the merged
/// weight, on every path.
pub fn interpolate(
    w0: &DMatrix<f64>,
    target: &ModuleWeights,
    kind: PathKind,
    alpha: f64,
) -> Result<DMatrix<f64>> {
    check_alpha(alpha)?;
    match (kind, target) {
        (PathKind::Delta, _) => {
            let merged = merge_module(w0, target)?;
            Ok(if alpha == 0.0 {
                w0.clone()
            } else if alpha == 1.0 {
                merged
            } else {
                w0 + (merged - w0) * alpha
            })
        }
        (PathKind::LoraFactor, ModuleWeights::Lora(l)) => {
            if alpha == 0.0 {
                // still validate the adapter against w0
                merge_lora(w0, l)?;
                return Ok(w0.clone());
            }
            let root = alpha.sqrt();
            let scaled = LoraAdapter {
                a: &l.a * root,
                b: &l.b * root,
                scale: l.scale,
            };
            merge_lora(w0, &scaled)
        }
        (PathKind::CayleyGenerator, ModuleWeights::Oft(o)) => {
            if alpha == 0.0 {
                check_blocks(w0, o)?;
                return Ok(w0.clone());
            }
            rotate_blocks(w0, o, alpha.sqrt())
        }
        (kind, other) => Err(GeoError::InvalidPath(format!(
            "path {} cannot follow a {:?} update",
            kind.as_str(),
            other.kind()
        ))),
    }
}

fn module_strength(weights: &ModuleWeights) -> f64 {
    match weights {
        ModuleWeights::Oft(o) => o.generator_norm_sq(),
        ModuleWeights::Lora(l) => l.delta().norm_squared(),
        ModuleWeights::Dense(_) => 0.0,
    }
}

/// Rotation-strength statistic for one block; `theta = 2 atan(sigma_max)`.
fn block_rotation_strength(q: &DMatrix<f64>) -> Result<f64> {
    let smax = singular_values(q, "oft block")?.max();
    let theta = 2.0 * smax.atan();
    Ok(1.0 - theta.cos())
}

/// Per-layer mean adapter strength, ordered by layer index.
pub fn layer_strengths(adapter: &CheckpointManifest) -> Result<Vec<LayerStrength>> {
    if adapter.role != Role::Adapter {
        return Err(GeoError::manifest(
            None,
            format!("layer strengths need an adapter manifest, got role {}", adapter.role),
        ));
    }
    let mut layers: std::collections::BTreeMap<usize, (f64, usize, f64, usize)> =
        Default::default();
    for m in &adapter.modules {
        let entry = layers.entry(m.layer_index).or_default();
        entry.0 += module_strength(&m.weights);
        entry.1 += 1;
        if let ModuleWeights::Oft(o) = &m.weights {
            for q in &o.blocks {
                entry.2 += block_rotation_strength(q)?;
                entry.3 += 1;
            }
        }
    }
    Ok(layers
        .into_iter()
        .map(|(layer_index, (total, modules, rot, blocks))| LayerStrength {
            layer_index,
            strength: total / modules as f64,
            modules,
            rotation_strength: (blocks > 0).then(|| rot / blocks as f64),
        })
        .collect())
}

/// Scale an adapter along its natural path by `alpha`: OFT generators by
/// `sqrt(alpha)`, each LoRA factor by `sqrt(alpha)`.
pub fn scale_adapter(weights: &ModuleWeights, alpha: f64) -> Result<ModuleWeights> {
    check_alpha(alpha)?;
    let root = alpha.sqrt();
    Ok(match weights {
        ModuleWeights::Oft(o) => ModuleWeights::Oft(OftAdapter {
            block_size: o.block_size,
            blocks: o.blocks.iter().map(|q| q * root).collect(),
        }),
        ModuleWeights::Lora(l) => ModuleWeights::Lora(LoraAdapter {
            a: &l.a * root,
            b: &l.b * root,
            scale: l.scale,
        }),
        ModuleWeights::Dense(_) => {
            return Err(GeoError::InvalidPath("dense modules cannot be rewound".into()))
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRewind {
    pub layer_index: usize,
    pub strength_before: f64,
    pub alpha: f64,
    pub strength_after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewindReport {
    pub policy: RewindPolicy,
    /// `None` for the uniform policy.
    pub reference_strength: Option<f64>,
    pub per_layer: Vec<LayerRewind>,
}

impl RewindReport {
    pub fn to_json(&self) -> Json {
        Json::obj([
            ("policy", Json::from(self.policy.to_string())),
            ("reference_strength", Json::from(self.reference_strength)),
            (
                "per_layer",
                Json::Arr(
                    self.per_layer
                        .iter()
                        .map(|l| {
                            Json::obj([
                                ("layer", Json::from(l.layer_index)),
                                ("strength_before", Json::from(l.strength_before)),
                                ("alpha", Json::from(l.alpha)),
                                ("strength_after", Json::from(l.strength_after)),
                            ])
                        })
                        .collect(),
                ),
            ),
        ])
    }
}

/// Per-layer coefficients `min(1, ref / strength)` and the reference used.
///
/// SafeScale keeps its reference layers as they are; zero-strength layers are
/// never touched.
pub fn rewind_coefficients(
    strengths: &[LayerStrength],
    policy: RewindPolicy,
) -> Result<(Option<f64>, Vec<f64>)> {
    let toward = |reference: f64, s: &LayerStrength| {
        if s.strength == 0.0 {
            1.0
        } else {
            (reference / s.strength).min(1.0)
        }
    };
    match policy {
        RewindPolicy::Uniform(alpha) => {
            check_alpha(alpha)?;
            Ok((None, vec![alpha; strengths.len()]))
        }
        RewindPolicy::SafeScale { reference_layers } => {
            if reference_layers == 0 || strengths.len() < reference_layers {
                return Err(GeoError::InvalidConfig(format!(
                    "safescale needs at least {reference_layers} layers, adapter has {}",
                    strengths.len()
                )));
            }
            let reference = strengths[..reference_layers]
                .iter()
                .map(|s| s.strength)
                .sum::<f64>()
                / reference_layers as f64;
            let alphas = strengths
                .iter()
                .enumerate()
                .map(|(i, s)| if i < reference_layers { 1.0 } else { toward(reference, s) })
                .collect();
            Ok((Some(reference), alphas))
        }
        RewindPolicy::MinScale => {
            let reference = strengths
                .iter()
                .map(|s| s.strength)
                .filter(|s| *s > 0.0)
                .fold(f64::INFINITY, f64::min);
            if !reference.is_finite() {
                return Err(GeoError::DegenerateInput(
                    "minscale on an adapter whose layers are all zero".into(),
                ));
            }
            Ok((Some(reference), strengths.iter().map(|s| toward(reference, s)).collect()))
        }
    }
}

/// Apply a rewinding policy, returning the rescaled adapter and a report.
pub fn rewind(
    adapter: &CheckpointManifest,
    policy: RewindPolicy,
) -> Result<(CheckpointManifest, RewindReport)> {
    let before = layer_strengths(adapter)?;
    let (reference_strength, alphas) = rewind_coefficients(&before, policy)?;
    let coefficient = |layer: usize| {
        before
            .iter()
            .position(|s| s.layer_index == layer)
            .map(|i| alphas[i])
            .unwrap_or(1.0)
    };
    let modules = adapter
        .modules
        .iter()
        .map(|m| {
            let alpha = coefficient(m.layer_index);
            let weights = if alpha == 1.0 {
                m.weights.clone()
            } else {
                scale_adapter(&m.weights, alpha)?
            };
            Ok(ModuleEntry {
                weights,
                ..m.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rewound = CheckpointManifest {
        model_id: format!("{}+{policy}", adapter.model_id),
        role: Role::Adapter,
        modules,
    };
    let after = layer_strengths(&rewound)?;
    let per_layer = before
        .iter()
        .zip(&after)
        .zip(&alphas)
        .map(|((b, a), &alpha)| LayerRewind {
            layer_index: b.layer_index,
            strength_before: b.strength,
            alpha,
            strength_after: a.strength,
        })
        .collect();
    Ok((
        rewound,
        RewindReport {
            policy,
            reference_strength,
            per_layer,
        },
    ))
}

/// One output of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub alpha: f64,
    /// Relative to the sweep output directory.
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepIndex {
    pub path_kind: PathKind,
    pub alphas: Vec<f64>,
    pub outputs: Vec<SweepEntry>,
}

impl SweepIndex {
    pub fn to_json(&self) -> Json {
        Json::obj([
            ("path_kind", Json::from(self.path_kind.as_str())),
            ("alphas", Json::floats(&self.alphas)),
            (
                "outputs",
                Json::Arr(
                    self.outputs
                        .iter()
                        .map(|e| {
                            Json::obj([
                                ("alpha", Json::from(e.alpha)),
                                (
                                    "manifest",
                                    Json::from(e.manifest.to_string_lossy().replace('\\', "/")),
                                ),
                            ])
                        })
                        .collect(),
                ),
            ),
        ])
    }
}

/// Apply `interpolate` to every base module the adapter touches; other
/// modules are copied unchanged.
pub fn interpolate_checkpoint(
    base: &CheckpointManifest,
    target: &CheckpointManifest,
    kind: PathKind,
    alpha: f64,
) -> Result<CheckpointManifest> {
    check_pair(base, target)?;
    let modules = base
        .modules
        .iter()
        .map(|m| {
            let w0 = m.dense().expect("base manifests hold dense modules");
            let w = match target.module(&m.name) {
                Some(t) => interpolate(w0, &t.weights, kind, alpha).map_err(|e| match e {
                    GeoError::ShapeMismatch { context, expected, found } => GeoError::ShapeMismatch {
                        context: format!("module {}: {context}", m.name),
                        expected,
                        found,
                    },
                    other => other,
                })?,
                None => w0.clone(),
            };
            Ok(ModuleEntry {
                weights: ModuleWeights::Dense(w),
                tensor_paths: Default::default(),
                ..m.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CheckpointManifest {
        model_id: format!("{}@{}={alpha}", target.model_id, kind.as_str()),
        role: Role::Finetuned,
        modules,
    })
}

/// Every target module must exist in the base, and the base must be dense.
pub fn check_pair(base: &CheckpointManifest, target: &CheckpointManifest) -> Result<()> {
    if base.role == Role::Adapter {
        return Err(GeoError::manifest(None, "base manifest has role adapter"));
    }
    let missing: Vec<&str> = target
        .modules
        .iter()
        .filter(|m| base.module(&m.name).is_none())
        .map(|m| m.name.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(GeoError::manifest(
            None,
            format!("modules absent from the base checkpoint: {}", missing.join(", ")),
        ));
    }
    Ok(())
}

/// Write one merged dense checkpoint per alpha under `out_dir` plus
/// `sweep_index.json`. Merges run on the current rayon pool; the index is
/// written after all of them finish.
pub fn sweep(
    base: &CheckpointManifest,
    target: &CheckpointManifest,
    path: &PathSpec,
    out_dir: &Path,
) -> Result<SweepIndex> {
    check_pair(base, target)?;
    // validate every module against the path before writing anything
    for t in &target.modules {
        let w0 = base.module(&t.name).and_then(ModuleEntry::dense).expect("checked pair");
        interpolate(w0, &t.weights, path.kind(), 0.0)?;
    }
    fs::create_dir_all(out_dir).map_err(|e| GeoError::io(out_dir, e))?;
    let outputs = path
        .alphas()
        .par_iter()
        .enumerate()
        .map(|(i, &alpha)| {
            let merged = interpolate_checkpoint(base, target, path.kind(), alpha)?;
            let dir_name = format!("alpha_{i:02}");
            write_manifest(&merged, &out_dir.join(&dir_name))?;
            Ok(SweepEntry {
                alpha,
                manifest: Path::new(&dir_name).join("manifest.json"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let index = SweepIndex {
        path_kind: path.kind(),
        alphas: path.alphas().to_vec(),
        outputs,
    };
    let index_path = out_dir.join("sweep_index.json");
    npy::write_atomic(&index_path, index.to_json().to_pretty().as_bytes())?;
    Ok(index)
}
