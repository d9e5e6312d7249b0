use std::collections::BTreeMap;
use std::path::Path;

use connectome_priors::digest::sha256_hex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance for one subcommand's outputs. `manifest.json` holds one entry
/// per subcommand run in the directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandManifest {
    pub tool_version: String,
    pub created_unix: u64,
    pub config_digest: String,
    pub backend: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub details: Value,
}

pub(crate) fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(CliError::io(path))?;
    Ok(sha256_hex(bytes))
}

/// Digest over every file below `dir`, in path order.
pub(crate) fn dir_digest(dir: &Path) -> Result<String, CliError> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(CliError::io(&d))? {
            let path = entry.map_err(CliError::io(&d))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push(path);
            }
        }
    }
    files.sort();
    let mut joined = String::new();
    for f in files {
        let rel = f.strip_prefix(dir).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        joined.push_str(&format!("{rel} {}\n", file_digest(&f)?));
    }
    Ok(sha256_hex(joined))
}

pub(crate) fn write_entry(out_dir: &Path, command: &str, entry: CommandManifest) -> Result<(), CliError> {
    let path = out_dir.join(MANIFEST_FILE);
    let mut all: BTreeMap<String, CommandManifest> = match std::fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
        Err(source) => return Err(CliError::Io { path, source }),
    };
    all.insert(command.to_string(), entry);
    let text = serde_json::to_string_pretty(&all).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(CliError::io(&path))
}
