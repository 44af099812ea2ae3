use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by every analysis and I/O routine in the crate.
#[derive(Debug, Error)]
pub enum GeoError {
    #[error("malformed NPY file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unsupported tensor {path}: {reason}")]
    UnsupportedTensor { path: PathBuf, reason: String },

    #[error("non-finite entry in {path} at flat index {index}")]
    NonFiniteData { path: PathBuf, index: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest error{}: {reason}", module_suffix(.module))]
    Manifest {
        module: Option<String>,
        reason: String,
    },

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: String,
        expected: String,
        found: String,
    },

    #[error("generator for module {module} is not skew-symmetric (max |Q + Q^T| = {max_asymmetry:e})")]
    InvalidGenerator { module: String, max_asymmetry: f64 },

    #[error("numerical failure in {module}: {reason}")]
    NumericalFailure { module: String, reason: String },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid pairing: {0}")]
    InvalidPairing(String),

    #[error("invalid interpolation path: {0}")]
    InvalidPath(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unpaired activation dumps: {}", .orphans.join(", "))]
    Pairing { orphans: Vec<String> },
}

fn module_suffix(module: &Option<String>) -> String {
    match module {
        Some(m) => format!(" in module {m}"),
        None => String::new(),
    }
}

impl GeoError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GeoError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Display,
        found: impl std::fmt::Display,
    ) -> Self {
        GeoError::ShapeMismatch {
            context: context.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn manifest(module: Option<&str>, reason: impl Into<String>) -> Self {
        GeoError::Manifest {
            module: module.map(str::to_owned),
            reason: reason.into(),
        }
    }

    /// Process exit code for the command-line front-end:
    /// 2 for input or validation errors, 3 for numerical failures, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            GeoError::Io { .. } => 4,
            GeoError::NumericalFailure { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = GeoError> = std::result::Result<T, E>;
