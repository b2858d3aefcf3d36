//! Run manifests: every command records the hashes of its config, inputs,
//! and outputs so chained stages can be audited and verified. The timestamp
//! is the only non-deterministic field and lives nowhere else.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::errors::{CliError, CliResult};

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|source| CliError::MissingInput {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(sha256_bytes(&bytes))
}

pub fn sha256_file_raw(path: &Path) -> CliResult<[u8; 32]> {
    let bytes = fs::read(path).map_err(|source| CliError::MissingInput {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Sha256::digest(&bytes).into())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config_sha256: String,
    /// The effective configuration (after CLI overrides), echoed verbatim.
    pub config_echo: String,
    /// Input path -> content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output path -> content hash.
    pub outputs: BTreeMap<String, String>,
    /// Seconds since the unix epoch; the only timestamp in any artifact.
    pub created_unix: u64,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config_bytes: &[u8]) -> Self {
        Manifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_sha256: sha256_bytes(config_bytes),
            config_echo: String::from_utf8_lossy(config_bytes).into_owned(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn record_input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) -> CliResult<()> {
        self.outputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn write(&self, out_dir: &Path) -> CliResult<()> {
        let path = out_dir.join(format!("manifest-{}.json", self.command));
        let json =
            serde_json::to_vec_pretty(self).map_err(|e| CliError::Other(e.to_string()))?;
        fs::write(path, json)?;
        Ok(())
    }
}
