use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use retro_core::datastore::sha256_hex;
use retro_core::{Error, Result};

use crate::RunConfig;

pub const TOOL_VERSION: &str = concat!("retro ", env!("CARGO_PKG_VERSION"));

/// Run record written beside every artifact: what ran, under which
/// configuration, and the checksum of each file produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub artifacts: BTreeMap<String, String>,
    pub results: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            tool_version: TOOL_VERSION.to_string(),
            command: command.to_string(),
            seed: config.seed,
            config: config.echo(),
            artifacts: BTreeMap::new(),
            results: serde_json::Value::Null,
        }
    }

    /// Records the checksum of `path` under its file name.
    pub fn add_file(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let name = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        self.artifacts.insert(name, sha256_hex(&bytes));
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub(crate) fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
