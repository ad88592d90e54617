//! Stage reports and file digests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Relative to the output directory when inside it.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub config_hash: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub counts: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn display_path(out: &Path, path: &Path) -> String {
    path.strip_prefix(out)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

pub fn digest(out: &Path, path: &Path) -> Result<FileDigest, CliError> {
    Ok(FileDigest {
        path: display_path(out, path),
        sha256: sha256_file(path)?,
    })
}

pub fn digests(out: &Path, paths: &[PathBuf]) -> Result<Vec<FileDigest>, CliError> {
    paths.iter().map(|p| digest(out, p)).collect()
}

pub fn report_path(out: &Path, stage: &str) -> PathBuf {
    out.join("reports").join(format!("{stage}.json"))
}

pub fn timing_path(out: &Path, stage: &str) -> PathBuf {
    out.join("timings").join(format!("{stage}.json"))
}

pub fn read_report(path: &Path) -> Result<Option<StageReport>, CliError> {
    match std::fs::read(path) {
        Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(CliError::io(path, e)),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// True when every recorded output still exists with the recorded digest.
pub fn outputs_intact(out: &Path, report: &StageReport) -> bool {
    !report.outputs.is_empty()
        && report.outputs.iter().all(|d| {
            let p = out.join(&d.path);
            sha256_file(&p).is_ok_and(|h| h == d.sha256)
        })
}
