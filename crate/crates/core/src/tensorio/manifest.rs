use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::npy;
use super::{load_block_stack, load_matrix, save_block_stack, save_dmatrix};
use crate::error::{GeoError, Result};

/// Tolerance on `max |Q + Q^T|` for stored OFT generator blocks.
pub const SKEW_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Base,
    Finetuned,
    Adapter,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Base => "base",
            Role::Finetuned => "finetuned",
            Role::Adapter => "adapter",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Dense,
    Lora,
    Oft,
}

impl ModuleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::Dense => "dense",
            ModuleKind::Lora => "lora",
            ModuleKind::Oft => "oft",
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLora {
    rank: usize,
    scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOft {
    block_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModule {
    name: String,
    layer_index: usize,
    kind: ModuleKind,
    shape: [usize; 2],
    tensors: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lora: Option<RawLora>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    oft: Option<RawOft>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    model_id: String,
    role: Role,
    modules: Vec<RawModule>,
}

/// Low-rank additive update `scale * B * A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `(rank, in_dim)`
    pub a: DMatrix<f64>,
    /// `(out_dim, rank)`
    pub b: DMatrix<f64>,
    pub scale: f64,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn delta(&self) -> DMatrix<f64> {
        &self.b * &self.a * self.scale
    }
}

/// Block-diagonal orthogonal adapter given by skew-symmetric Cayley generators.
#[derive(Debug, Clone, PartialEq)]
pub struct OftAdapter {
    pub block_size: usize,
    pub blocks: Vec<DMatrix<f64>>,
}

impl OftAdapter {
    /// Sum of squared Frobenius norms over all generator blocks.
    pub fn generator_norm_sq(&self) -> f64 {
        self.blocks.iter().map(|q| q.norm_squared()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModuleWeights {
    Dense(DMatrix<f64>),
    Lora(LoraAdapter),
    Oft(OftAdapter),
}

impl ModuleWeights {
    pub fn kind(&self) -> ModuleKind {
        match self {
            ModuleWeights::Dense(_) => ModuleKind::Dense,
            ModuleWeights::Lora(_) => ModuleKind::Lora,
            ModuleWeights::Oft(_) => ModuleKind::Oft,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleEntry {
    pub name: String,
    pub layer_index: usize,
    /// `(out_dim, in_dim)`
    pub shape: (usize, usize),
    pub tensor_paths: BTreeMap<String, PathBuf>,
    pub weights: ModuleWeights,
}

impl ModuleEntry {
    pub fn kind(&self) -> ModuleKind {
        self.weights.kind()
    }

    pub fn dense(&self) -> Option<&DMatrix<f64>> {
        match &self.weights {
            ModuleWeights::Dense(w) => Some(w),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointManifest {
    pub model_id: String,
    pub role: Role,
    pub modules: Vec<ModuleEntry>,
}

impl CheckpointManifest {
    pub fn module(&self, name: &str) -> Option<&ModuleEntry> {
        self.modules.iter().find(|m| m.name == name)
    }

    pub fn module_names(&self) -> Vec<&str> {
        self.modules.iter().map(|m| m.name.as_str()).collect()
    }
}

fn require_keys(module: &RawModule, keys: &[&str]) -> Result<()> {
    let have: Vec<&str> = module.tensors.keys().map(String::as_str).collect();
    let mut want: Vec<&str> = keys.to_vec();
    want.sort_unstable();
    if have != want {
        return Err(GeoError::manifest(
            Some(&module.name),
            format!("kind {:?} needs tensors {want:?}, found {have:?}", module.kind),
        ));
    }
    Ok(())
}

fn check_shape(module: &str, role: &str, found: (usize, usize), expected: (usize, usize)) -> Result<()> {
    if found != expected {
        return Err(GeoError::shape(
            format!("module {module} tensor {role}"),
            format!("{expected:?}"),
            format!("{found:?}"),
        ));
    }
    Ok(())
}

/// Largest elementwise violation of skew-symmetry, `max |Q + Q^T|`.
pub fn skew_violation(q: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..q.nrows() {
        for j in i..q.ncols() {
            worst = worst.max((q[(i, j)] + q[(j, i)]).abs());
        }
    }
    worst
}

fn resolve_module(raw: RawModule, base_dir: &Path) -> Result<ModuleEntry> {
    let (out_dim, in_dim) = (raw.shape[0], raw.shape[1]);
    if out_dim == 0 || in_dim == 0 {
        return Err(GeoError::manifest(Some(&raw.name), "zero-size shape"));
    }
    let paths: BTreeMap<String, PathBuf> = raw
        .tensors
        .iter()
        .map(|(k, p)| (k.clone(), base_dir.join(p)))
        .collect();
    for (role, path) in &paths {
        if !path.is_file() {
            return Err(GeoError::manifest(
                Some(&raw.name),
                format!("tensor {role} file {} does not exist", path.display()),
            ));
        }
    }
    let name = raw.name.as_str();
    let weights = match raw.kind {
        ModuleKind::Dense => {
            require_keys(&raw, &["W"])?;
            if raw.lora.is_some() || raw.oft.is_some() {
                return Err(GeoError::manifest(Some(name), "dense module carries adapter attributes"));
            }
            let w = load_matrix(&paths["W"])?;
            check_shape(name, "W", w.shape(), (out_dim, in_dim))?;
            ModuleWeights::Dense(w.to_dmatrix())
        }
        ModuleKind::Lora => {
            require_keys(&raw, &["A", "B"])?;
            let attrs = raw
                .lora
                .as_ref()
                .ok_or_else(|| GeoError::manifest(Some(name), "lora module lacks \"lora\" attributes"))?;
            if attrs.rank == 0 {
                return Err(GeoError::manifest(Some(name), "lora rank must be >= 1"));
            }
            if !(attrs.scale.is_finite() && attrs.scale > 0.0) {
                return Err(GeoError::manifest(Some(name), "lora scale must be > 0"));
            }
            // header-only checks first so a mis-shaped file is reported before decoding
            for (role, expected) in [("A", (attrs.rank, in_dim)), ("B", (out_dim, attrs.rank))] {
                let header = npy::read_header(&paths[role])?;
                let found = match header.shape.as_slice() {
                    [r, c] => (*r, *c),
                    [n] => (1, *n),
                    other => {
                        return Err(GeoError::shape(
                            format!("module {name} tensor {role}"),
                            format!("{expected:?}"),
                            format!("{other:?}"),
                        ))
                    }
                };
                check_shape(name, role, found, expected)?;
            }
            let a = load_matrix(&paths["A"])?.to_dmatrix();
            let b = load_matrix(&paths["B"])?.to_dmatrix();
            ModuleWeights::Lora(LoraAdapter {
                a,
                b,
                scale: attrs.scale,
            })
        }
        ModuleKind::Oft => {
            require_keys(&raw, &["Q"])?;
            let attrs = raw
                .oft
                .as_ref()
                .ok_or_else(|| GeoError::manifest(Some(name), "oft module lacks \"oft\" attributes"))?;
            let b = attrs.block_size;
            if b == 0 || in_dim % b != 0 {
                return Err(GeoError::shape(
                    format!("module {name} oft blocks"),
                    format!("block size dividing in_dim {in_dim}"),
                    format!("block size {b}"),
                ));
            }
            let blocks = load_block_stack(&paths["Q"])?;
            let stacked = blocks.first().map(|q| q.nrows()).unwrap_or(0);
            if stacked != b || blocks.len() * b != in_dim {
                return Err(GeoError::shape(
                    format!("module {name} tensor Q"),
                    format!("({}, {b}, {b})", in_dim / b),
                    format!("({}, {stacked}, {stacked})", blocks.len()),
                ));
            }
            let worst = blocks.iter().map(skew_violation).fold(0.0, f64::max);
            if worst > SKEW_TOLERANCE {
                return Err(GeoError::InvalidGenerator {
                    module: name.to_owned(),
                    max_asymmetry: worst,
                });
            }
            ModuleWeights::Oft(OftAdapter {
                block_size: b,
                blocks,
            })
        }
    };
    Ok(ModuleEntry {
        name: raw.name,
        layer_index: raw.layer_index,
        shape: (out_dim, in_dim),
        tensor_paths: paths,
        weights,
    })
}

/// Parse and fully validate a manifest, loading every tensor it references.
/// Tensor paths are resolved relative to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<CheckpointManifest> {
    let text = fs::read_to_string(path).map_err(|e| GeoError::io(path, e))?;
    let raw: RawManifest = serde_json::from_str(&text)
        .map_err(|e| GeoError::manifest(None, format!("{}: {e}", path.display())))?;
    let base_dir = path.parent().unwrap_or_else(|| Path::new("."));

    let mut seen = HashSet::new();
    for m in &raw.modules {
        if !seen.insert(m.name.as_str()) {
            return Err(GeoError::manifest(Some(&m.name), "duplicate module name"));
        }
        let allowed = match raw.role {
            Role::Base | Role::Finetuned => m.kind == ModuleKind::Dense,
            Role::Adapter => m.kind != ModuleKind::Dense,
        };
        if !allowed {
            return Err(GeoError::manifest(
                Some(&m.name),
                format!("kind {:?} not allowed in a {} manifest", m.kind, raw.role),
            ));
        }
    }

    let modules = raw
        .modules
        .into_iter()
        .map(|m| resolve_module(m, base_dir))
        .collect::<Result<Vec<_>>>()?;
    Ok(CheckpointManifest {
        model_id: raw.model_id,
        role: raw.role,
        modules,
    })
}

/// Write every module's tensors into `dir` and a `manifest.json` referencing
/// them by relative path. Returns the manifest path.
pub fn write_manifest(manifest: &CheckpointManifest, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| GeoError::io(dir, e))?;
    let mut raw_modules = Vec::with_capacity(manifest.modules.len());
    for m in &manifest.modules {
        let mut tensors = BTreeMap::new();
        let mut put = |role: &str| {
            let file = PathBuf::from(format!("{}.{role}.npy", m.name));
            tensors.insert(role.to_owned(), file.clone());
            dir.join(file)
        };
        let (lora, oft) = match &m.weights {
            ModuleWeights::Dense(w) => {
                save_dmatrix(w, &put("W"))?;
                (None, None)
            }
            ModuleWeights::Lora(l) => {
                save_dmatrix(&l.a, &put("A"))?;
                save_dmatrix(&l.b, &put("B"))?;
                (
                    Some(RawLora {
                        rank: l.rank(),
                        scale: l.scale,
                    }),
                    None,
                )
            }
            ModuleWeights::Oft(o) => {
                save_block_stack(&o.blocks, &put("Q"))?;
                (
                    None,
                    Some(RawOft {
                        block_size: o.block_size,
                    }),
                )
            }
        };
        raw_modules.push(RawModule {
            name: m.name.clone(),
            layer_index: m.layer_index,
            kind: m.kind(),
            shape: [m.shape.0, m.shape.1],
            tensors,
            lora,
            oft,
        });
    }
    let raw = RawManifest {
        model_id: manifest.model_id.clone(),
        role: manifest.role,
        modules: raw_modules,
    };
    let mut text = serde_json::to_string_pretty(&raw)
        .map_err(|e| GeoError::manifest(None, e.to_string()))?;
    text.push('\n');
    let path = dir.join("manifest.json");
    npy::write_atomic(&path, text.as_bytes())?;
    Ok(path)
}
