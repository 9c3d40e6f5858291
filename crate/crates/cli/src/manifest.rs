//! Run manifests: every output file is accompanied by a
//! `<file>.manifest.json` recording the command, resolved flags, seeds, and
//! input digests, so a run can be reproduced and verified byte-for-byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub flags: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub input_digests: BTreeMap<String, String>,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            flags: BTreeMap::new(),
            seeds: BTreeMap::new(),
            input_digests: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn flag(mut self, name: &str, value: impl ToString) -> Self {
        self.flags.insert(name.to_string(), value.to_string());
        self
    }

    pub fn flag_opt(self, name: &str, value: Option<impl ToString>) -> Self {
        match value {
            Some(v) => self.flag(name, v),
            None => self,
        }
    }

    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    pub fn input(mut self, path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        let digest = Sha256::digest(&bytes);
        self.input_digests.insert(path.display().to_string(), hex::encode(digest));
        Ok(self)
    }

    /// Writes `<output>.manifest.json` next to the output file.
    pub fn write_alongside(&self, output: &Path) -> Result<(), CliError> {
        let mut path = output.as_os_str().to_owned();
        path.push(".manifest.json");
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Internal(format!("manifest: {e}")))?;
        text.push('\n');
        std::fs::write(&path, text)
            .map_err(|e| CliError::Internal(format!("cannot write manifest: {e}")))
    }
}
