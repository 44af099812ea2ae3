//! Output targets and stderr progress.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use geoscope_core::tensorio::npy;
use geoscope_core::{GeoError, Result};

/// Where a report goes: a file, or standard output for `-`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Sink {
    Stdout,
    File(PathBuf),
}

impl FromStr for Sink {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(if s == "-" {
            Sink::Stdout
        } else {
            Sink::File(PathBuf::from(s))
        })
    }
}

impl Sink {
    /// The parent directory must already exist and the target must not be a
    /// directory.
    pub fn validate(&self) -> Result<()> {
        let Sink::File(path) = self else {
            return Ok(());
        };
        if path.is_dir() {
            return Err(GeoError::InvalidConfig(format!(
                "output {} is a directory",
                path.display()
            )));
        }
        let parent = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        if !parent.is_dir() {
            return Err(GeoError::InvalidConfig(format!(
                "output directory {} does not exist",
                parent.display()
            )));
        }
        Ok(())
    }

    pub fn write(&self, text: &str) -> Result<()> {
        match self {
            Sink::Stdout => {
                let mut out = std::io::stdout().lock();
                out.write_all(text.as_bytes())
                    .and_then(|_| out.flush())
                    .map_err(|source| GeoError::Io {
                        path: PathBuf::from("<stdout>"),
                        source,
                    })
            }
            Sink::File(path) => npy::write_atomic(path, text.as_bytes()),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Sink::Stdout => "standard output".into(),
            Sink::File(p) => p.display().to_string(),
        }
    }
}

pub fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(GeoError::InvalidConfig(format!(
            "{what} {} is not a readable file",
            path.display()
        )));
    }
    Ok(())
}

pub fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        return Err(GeoError::InvalidConfig(format!(
            "{what} {} is not a directory",
            path.display()
        )));
    }
    Ok(())
}

/// An output directory may exist already but must not be a file.
pub fn require_out_dir(path: &Path) -> Result<()> {
    if path.exists() && !path.is_dir() {
        return Err(GeoError::InvalidConfig(format!(
            "output directory {} is an existing file",
            path.display()
        )));
    }
    Ok(())
}

/// Progress and log text, always on standard error.
#[derive(Debug, Clone, Copy)]
pub struct Progress {
    pub quiet: bool,
}

impl Progress {
    pub fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("geoscope: {}", msg.as_ref());
        }
    }
}
