use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mpsclip::Result;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Output directory that records every file it writes.
pub struct OutDir {
    root: PathBuf,
    artifacts: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    argv: Vec<String>,
    seed: Option<u64>,
    config: &'a Value,
    inputs: &'a BTreeMap<String, String>,
    artifacts: &'a BTreeMap<String, String>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(OutDir { root: root.to_path_buf(), artifacts: BTreeMap::new(), inputs: BTreeMap::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        std::fs::write(&path, bytes)?;
        self.artifacts.insert(name.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    /// Reads an input file and records its hash.
    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path)?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    /// Writes `manifest.json` with the config echo, the seed and the hashes of
    /// all inputs and outputs.
    pub fn finish(self, command: &str, seed: Option<u64>, config: &Value) -> Result<()> {
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            argv: std::env::args().collect(),
            seed,
            config,
            inputs: &self.inputs,
            artifacts: &self.artifacts,
        };
        std::fs::write(self.root.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
