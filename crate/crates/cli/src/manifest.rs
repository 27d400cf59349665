use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to rerun a command. Contains no timestamps, so identical
/// invocations produce identical manifests.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub inputs: Vec<InputRecord>,
    pub output: String,
    pub seed: Option<u64>,
    pub params: serde_json::Value,
    pub tool_version: String,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

impl RunManifest {
    pub fn new(command: &str, inputs: &[PathBuf], output: &Path, seed: Option<u64>, params: serde_json::Value) -> CliResult<Self> {
        let inputs = inputs
            .iter()
            .map(|p| Ok(InputRecord { path: p.display().to_string(), sha256: sha256_file(p)? }))
            .collect::<CliResult<Vec<_>>>()?;
        Ok(Self {
            command: command.into(),
            inputs,
            output: output.display().to_string(),
            seed,
            params,
            tool_version: TOOL_VERSION.into(),
        })
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
    }
}

/// Manifest location for a command writing a single file.
pub fn manifest_for_file(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Default output root, overridable with `FILTERPRIOR_OUT`.
pub fn output_root() -> PathBuf {
    std::env::var_os("FILTERPRIOR_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("filterprior-out"))
}
