//! Config resolution, manifests and small file helpers shared by the
//! subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::Serialize;
use soir_core::io::{format_matrix_csv, load_config, write_atomic, RunManifest};
use soir_core::Error;

use crate::error::CliError;

pub struct Global {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

impl Global {
    /// Config from `--config` (bare or wrapped in a manifest), else defaults.
    pub fn load<C: DeserializeOwned + Default>(&self) -> Result<C, CliError> {
        match &self.config {
            Some(p) => Ok(load_config(p)?),
            None => Ok(C::default()),
        }
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        fs::create_dir_all(&self.out).map_err(|e| Error::Io {
            path: self.out.display().to_string(),
            source: e,
        })?;
        Ok(&self.out)
    }

    /// Writes `manifest.json` for a finished run.
    pub fn manifest<C: Serialize>(&self, command: &str, config: C, seed: u64, outputs: Vec<String>) -> Result<(), CliError> {
        let mut m = RunManifest::new(command, config, seed);
        m.config_path = self.config.as_ref().map(|p| p.display().to_string());
        m.finish(&self.out, outputs)?;
        Ok(())
    }
}

/// Absolute form of an input path so a manifest replays from any directory.
pub fn absolute(path: &Path) -> Result<PathBuf, CliError> {
    fs::canonicalize(path).map_err(|e| {
        CliError::Core(Error::Io {
            path: path.display().to_string(),
            source: e,
        })
    })
}

/// `path` if given on the command line, else the config value. Errors if
/// neither is set.
pub fn required_path(flag: Option<PathBuf>, from_config: Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    let p = flag
        .or(from_config)
        .ok_or_else(|| CliError::usage(format!("--{name} is required")))?;
    absolute(&p)
}

pub fn optional_path(flag: Option<PathBuf>, from_config: Option<PathBuf>) -> Result<Option<PathBuf>, CliError> {
    flag.or(from_config).map(|p| absolute(&p)).transpose()
}

pub fn warn(msg: &str) {
    eprintln!("warning: {msg}");
}

pub fn notice(msg: &str) {
    eprintln!("notice: {msg}");
}

pub fn write_text(dir: &Path, name: &str, text: &str) -> Result<String, CliError> {
    write_atomic(&dir.join(name), text.as_bytes())?;
    Ok(name.to_string())
}

pub fn write_matrix(dir: &Path, name: &str, m: &Array2<f64>) -> Result<String, CliError> {
    write_text(dir, name, &format_matrix_csv(m.nrows(), m.ncols(), |r, c| m[[r, c]]))
}

/// Reads a headerless comma-separated numeric matrix.
pub fn read_matrix(path: &Path) -> Result<Array2<f64>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let bad = |line: usize, message: String| {
        CliError::Core(Error::Format {
            location: format!("{} line {}", path.display(), line + 1),
            message,
        })
    };
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|e| bad(i, format!("'{s}': {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => return Err(bad(i, format!("expected {c} columns, found {}", row.len()))),
            _ => {}
        }
        values.extend(row);
        rows += 1;
    }
    Array2::from_shape_vec((rows, cols.unwrap_or(0)), values).map_err(|e| bad(0, e.to_string()))
}
