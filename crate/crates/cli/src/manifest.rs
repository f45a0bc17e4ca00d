//! `manifest.json`: what was run, on what, with which configuration.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub webal: &'static str,
    pub webal_cli: &'static str,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    /// SHA-256 of the compact JSON of `config`.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<String>,
    pub versions: Versions,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        let bytes = serde_json::to_vec(&config).expect("JSON value serializes");
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            seed,
            config_hash: sha256_hex(&bytes),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            versions: Versions { webal: webal::VERSION, webal_cli: env!("CARGO_PKG_VERSION") },
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.inputs.push(InputFile { path: path.to_path_buf(), sha256: sha256_hex(&bytes) });
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn hash_tracks_config() {
        let a = Manifest::new("weights", 1, serde_json::json!({"delta": 0.05}));
        let b = Manifest::new("weights", 1, serde_json::json!({"delta": 0.05}));
        let c = Manifest::new("weights", 1, serde_json::json!({"delta": 0.06}));
        assert_eq!(a.config_hash, b.config_hash);
        assert_ne!(a.config_hash, c.config_hash);
    }
}
