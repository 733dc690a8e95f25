//! Shared file helpers: little-endian f64 blobs, atomic writes and CSV
//! formatting.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{io_err, Error, Result};

/// Version stamped into every JSON header and manifest written by this crate.
pub const FORMAT_VERSION: u32 = 1;

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    let file_name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn write_f64_le(path: &Path, values: impl IntoIterator<Item = f64>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

/// Reads exactly `count` little-endian f64 values.
pub fn read_f64_le(path: &Path, count: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_f64_le(&bytes, count).map_err(|message| Error::Format {
        location: path.display().to_string(),
        message,
    })
}

pub fn decode_f64_le(bytes: &[u8], count: usize) -> std::result::Result<Vec<f64>, String> {
    let expected = count * 8;
    if bytes.len() < expected {
        let offset = bytes.len() - bytes.len() % 8;
        return Err(format!(
            "file truncated at byte offset {offset}: expected {expected} bytes, found {}",
            bytes.len()
        ));
    }
    if bytes.len() > expected {
        return Err(format!(
            "unexpected trailing data at byte offset {expected}: file has {} bytes",
            bytes.len()
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// One float per line, shortest round-trip representation.
pub fn format_column(values: impl IntoIterator<Item = f64>) -> String {
    let mut s = String::new();
    for v in values {
        s.push_str(&format!("{v}\n"));
    }
    s
}

pub fn parse_column(text: &str, location: &str) -> Result<Vec<f64>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<f64>().map_err(|e| Error::Format {
                location: format!("{location} line {}", i + 1),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Writes a matrix as CSV rows.
pub fn format_matrix_csv(rows: usize, cols: usize, at: impl Fn(usize, usize) -> f64) -> String {
    let mut s = String::new();
    for r in 0..rows {
        for c in 0..cols {
            if c > 0 {
                s.push(',');
            }
            s.push_str(&format!("{}", at(r, c)));
        }
        s.push('\n');
    }
    s
}

pub const RUN_MANIFEST: &str = "manifest.json";

/// Record of one command invocation. Its `config` is complete, so a run can be
/// replayed from the manifest alone.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunManifest<C> {
    pub format_version: u32,
    pub command: String,
    pub tool_version: String,
    /// Config file the run was started from, if any.
    pub config_path: Option<String>,
    pub seed: u64,
    pub out_dir: String,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub finished_at: u64,
    /// Files written by the run, relative to `out_dir`.
    pub outputs: Vec<String>,
    /// Fully resolved config.
    pub config: C,
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

impl<C: serde::Serialize> RunManifest<C> {
    pub fn new(command: &str, config: C, seed: u64) -> Self {
        let now = unix_now();
        RunManifest {
            format_version: FORMAT_VERSION,
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_path: None,
            seed,
            out_dir: String::new(),
            started_at: now,
            finished_at: now,
            outputs: Vec::new(),
            config,
        }
    }

    /// Stamps the finish time and output list, then writes `manifest.json`
    /// into `dir`.
    pub fn finish(mut self, dir: &Path, outputs: Vec<String>) -> Result<Self> {
        self.finished_at = unix_now();
        self.out_dir = dir.display().to_string();
        self.outputs = outputs;
        write_atomic(&dir.join(RUN_MANIFEST), serde_json::to_string_pretty(&self)?.as_bytes())?;
        Ok(self)
    }
}

/// Reads a config file that is either a bare config or a run manifest
/// wrapping one.
pub fn load_config<C: serde::de::DeserializeOwned>(path: &Path) -> Result<C> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format {
        location: path.display().to_string(),
        message: e.to_string(),
    })?;
    let inner = match value.get("format_version").and(value.get("config")) {
        Some(c) => {
            let v = value["format_version"].as_u64();
            if v != Some(FORMAT_VERSION as u64) {
                return Err(Error::Format {
                    location: path.display().to_string(),
                    message: format!("unsupported format_version {:?}", value["format_version"]),
                });
            }
            c.clone()
        }
        None => value,
    };
    serde_json::from_value(inner).map_err(|e| Error::Format {
        location: path.display().to_string(),
        message: e.to_string(),
    })
}
