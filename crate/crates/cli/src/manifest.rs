//! `manifest.json`: what a command read, what it wrote, and with which settings.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Config,
    pub seed: Option<u64>,
    pub version: &'static str,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_time_s: f64,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Every regular file under `path` (or `path` itself), sorted, except manifests.
pub fn collect_files(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    if path.is_file() {
        out.push(path.to_path_buf());
        return Ok(out);
    }
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
        for entry in entries {
            let p = entry.map_err(|e| CliError::Runtime(e.to_string()))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != MANIFEST_FILE) {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn digests(paths: &[PathBuf]) -> Result<Vec<FileDigest>, CliError> {
    let mut out = Vec::new();
    for p in paths {
        for f in collect_files(p)? {
            out.push(FileDigest {
                sha256: sha256_file(&f)?,
                path: f,
            });
        }
    }
    Ok(out)
}

pub struct Recorder {
    command: String,
    started: Instant,
    inputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn start(command: &str, inputs: &[&Path]) -> Self {
        Self {
            command: command.to_string(),
            started: Instant::now(),
            inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
        }
    }

    /// Hashes inputs and outputs and writes `out_dir/manifest.json`.
    pub fn finish(
        self,
        out_dir: &Path,
        config: &Config,
        seed: Option<u64>,
        outputs: &[PathBuf],
    ) -> Result<PathBuf, CliError> {
        let manifest = RunManifest {
            command: self.command,
            config: config.clone(),
            seed,
            version: env!("CARGO_PKG_VERSION"),
            inputs: digests(&self.inputs)?,
            outputs: digests(outputs)?,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        let path = out_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}
