use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

/// Writes `bytes` to `path` through a sibling temp file and a rename, so a
/// reader never sees a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let mut file = fs::File::create(&tmp).map_err(|e| io_error(&tmp, e))?;
    file.write_all(bytes)
        .and_then(|_| file.sync_all())
        .map_err(|e| io_error(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_error(path, e))
}

pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| io_error(path, e))
}

/// Reads an artifact an earlier subcommand should have produced.
pub fn read_prerequisite<T: DeserializeOwned>(path: &Path, producer: &str) -> Result<T, CliError> {
    if !path.exists() {
        return Err(CliError::Input(format!(
            "missing prerequisite artifact {}; run `{producer}` first",
            path.display()
        )));
    }
    read_json(path)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    Ok(sha256_hex(&read(path)?))
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

/// One subcommand invocation as recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub runs: BTreeMap<String, ManifestEntry>,
}

/// Tracks the files one subcommand reads and writes.
#[derive(Debug)]
pub struct Run {
    pub out: PathBuf,
    started: u64,
    inputs: Vec<FileRecord>,
    outputs: Vec<FileRecord>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl Run {
    pub fn new(out: &Path) -> Self {
        Run {
            out: out.to_path_buf(),
            started: unix_now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let sha256 = file_sha256(path)?;
        if !self.inputs.iter().any(|r| r.path == path.display().to_string()) {
            self.inputs.push(FileRecord {
                path: path.display().to_string(),
                sha256,
            });
        }
        Ok(())
    }

    /// Writes an output file under the output directory.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.out.join(name);
        write_atomic(&path, bytes)?;
        self.outputs.retain(|r| r.path != name);
        self.outputs.push(FileRecord {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        log::info!("wrote {}", path.display());
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        self.write(name, &to_json(value)?)
    }

    /// Records this run in the manifest, replacing any earlier entry for the
    /// same command.
    pub fn finish(self, command: &str, config_hash: &str, seed: u64) -> Result<(), CliError> {
        let path = self.out.join(MANIFEST);
        let mut manifest: Manifest = if path.exists() {
            read_json(&path).unwrap_or_else(|e| {
                log::warn!("replacing unreadable manifest: {e}");
                Manifest::default()
            })
        } else {
            Manifest::default()
        };
        manifest.runs.insert(
            command.to_string(),
            ManifestEntry {
                config_hash: config_hash.to_string(),
                seed,
                version: env!("CARGO_PKG_VERSION").to_string(),
                inputs: self.inputs,
                outputs: self.outputs,
                started_unix: self.started,
                finished_unix: unix_now(),
            },
        );
        write_atomic(&path, &to_json(&manifest)?)
    }
}
