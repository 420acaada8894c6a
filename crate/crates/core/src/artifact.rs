//! Versioned JSON artifacts, atomic file output and capture manifests.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::codec::{format_log_line, read_log_file, CanFrame, LogFormat};
use crate::error::{Error, Result};
use crate::pipeline::{CanonicalSeries, StateCapture};

pub const ARTIFACT_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Common wrapper of every JSON artifact: the payload plus the configuration
/// that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub version: u32,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub payload: T,
}

impl<T> Envelope<T> {
    pub fn new(config: serde_json::Value, payload: T) -> Self {
        Self {
            version: ARTIFACT_VERSION,
            tool_version: TOOL_VERSION.to_string(),
            config,
            payload,
        }
    }
}

fn artifact_err(path: &Path, message: impl std::fmt::Display) -> Error {
    Error::Artifact {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

/// Write through a temporary file in the target directory and rename it into
/// place, so a failed write never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| artifact_err(path, e))?;
    tmp.write_all(bytes).map_err(|e| artifact_err(path, e))?;
    tmp.as_file().sync_all().map_err(|e| artifact_err(path, e))?;
    tmp.persist(path).map_err(|e| artifact_err(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| artifact_err(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| artifact_err(path, e))
}

/// Read an enveloped artifact, rejecting unknown versions.
pub fn read_envelope<T: DeserializeOwned>(path: &Path) -> Result<Envelope<T>> {
    let env: Envelope<T> = read_json(path)?;
    if env.version != ARTIFACT_VERSION {
        return Err(artifact_err(
            path,
            format!("unsupported artifact version {}", env.version),
        ));
    }
    Ok(env)
}

/// A capture log in candump or CSV form.
pub fn log_text(frames: &[CanFrame], format: LogFormat) -> String {
    let mut out = String::new();
    if format == LogFormat::Csv {
        out.push_str("timestamp,aid,data\n");
    }
    for f in frames {
        out.push_str(&format_log_line(f, format));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub label: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    #[serde(default)]
    pub format: LogFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canonical_series: Option<PathBuf>,
}

/// The list of labelled ambient captures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub captures: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: Manifest = read_json(path)?;
        if m.version != MANIFEST_VERSION {
            return Err(artifact_err(
                path,
                format!("unsupported manifest version {}", m.version),
            ));
        }
        if m.captures.is_empty() {
            return Err(artifact_err(path, "manifest lists no captures"));
        }
        Ok(m)
    }

    /// Load every listed capture, in manifest order.
    pub fn load_captures(path: &Path) -> Result<Vec<StateCapture>> {
        let m = Self::load(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        m.captures
            .iter()
            .map(|e| {
                let log = base.join(&e.path);
                let (frames, stats) = read_log_file(&log, e.format).map_err(|err| artifact_err(&log, err))?;
                if stats.remote_frames + stats.error_frames > 0 {
                    log::info!(
                        "{}: dropped {} remote and {} error frames",
                        log.display(),
                        stats.remote_frames,
                        stats.error_frames
                    );
                }
                let canonical = match &e.canonical_series {
                    Some(p) => {
                        let p = base.join(p);
                        let file = File::open(&p).map_err(|err| artifact_err(&p, err))?;
                        Some(CanonicalSeries::read_csv(BufReader::new(file)).map_err(|err| artifact_err(&p, err))?)
                    }
                    None => None,
                };
                Ok(StateCapture::new(e.label.clone(), frames, canonical))
            })
            .collect()
    }

    /// Write each capture's log (and canonical CSV) into `dir` and the
    /// manifest to `dir/manifest.json`.
    pub fn write_captures(dir: &Path, captures: &[StateCapture], format: LogFormat) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| artifact_err(dir, e))?;
        let ext = match format {
            LogFormat::Candump => "log",
            LogFormat::Csv => "csv",
        };
        let mut entries = Vec::with_capacity(captures.len());
        for c in captures {
            let stem = c
                .label
                .to_lowercase()
                .replace(|ch: char| !ch.is_ascii_alphanumeric(), "_");
            let log = PathBuf::from(format!("{stem}.{ext}"));
            write_atomic(&dir.join(&log), log_text(&c.frames, format).as_bytes())?;
            let canonical_series = match &c.canonical {
                Some(s) => {
                    let p = PathBuf::from(format!("{stem}.canonical.csv"));
                    write_atomic(&dir.join(&p), s.to_csv().as_bytes())?;
                    Some(p)
                }
                None => None,
            };
            entries.push(ManifestEntry {
                label: c.label.clone(),
                path: log,
                format,
                canonical_series,
            });
        }
        let path = dir.join("manifest.json");
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            captures: entries,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        write_atomic(&path, &bytes)?;
        Ok(path)
    }
}
