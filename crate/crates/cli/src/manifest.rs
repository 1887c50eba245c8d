//! Run manifests written next to every artifact.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MANIFEST_FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: String,
    pub command: String,
    /// Full argument vector, program name excluded.
    pub argv: Vec<String>,
    /// Effective configuration after defaults and command-line overrides.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub wall_time_secs: f64,
}

/// `<artifact>.manifest.json`, or `manifest.json` inside a directory.
pub fn manifest_path(artifact: &Path) -> PathBuf {
    if artifact.is_dir() {
        return artifact.join("manifest.json");
    }
    let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

/// Writes through a temporary file in the same directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = dir.join(tmp_name);
    let result = fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(bytes).and_then(|_| f.sync_all()))
        .and_then(|_| fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(CliError::data(format!("{}: {e}", path.display())));
    }
    Ok(())
}

impl RunManifest {
    pub fn write_for(&self, artifact: &Path) -> Result<PathBuf, CliError> {
        let path = manifest_path(artifact);
        let mut text = serde_json::to_string_pretty(self).map_err(|e| CliError::data(e.to_string()))?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}
