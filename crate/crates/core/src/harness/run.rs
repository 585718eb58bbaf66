//! `manifest.json` for command runs that do not produce a checkpoint.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::{directory_digest, sha256_file};
use crate::error::Result;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seeds: BTreeMap<String, u64>,
    /// Echo of the effective configuration.
    pub config: BTreeMap<String, String>,
    /// sha256 of every input file, and per-file digests of input directories.
    pub inputs: BTreeMap<String, serde_json::Value>,
    pub outputs: BTreeMap<String, String>,
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self { command: command.into(), version: env!("CARGO_PKG_VERSION").into(), ..Default::default() }
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        let v = if path.is_dir() {
            serde_json::to_value(directory_digest(path)?)?
        } else {
            serde_json::Value::String(sha256_file(path)?)
        };
        self.inputs.insert(name.into(), v);
        Ok(())
    }

    pub fn output(&mut self, name: &str, path: &Path) -> Result<()> {
        self.outputs.insert(name.into(), sha256_file(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_hashes_of_files_and_directories() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.txt");
        std::fs::write(&f, "abc").unwrap();
        let mut m = RunManifest::new("generate");
        m.input("file", &f).unwrap();
        m.input("dir", dir.path()).unwrap();
        m.output("out", &f).unwrap();
        assert_eq!(m.inputs["file"], "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert!(m.inputs["dir"].get("a.txt").is_some());
        let p = dir.path().join("manifest.json");
        m.write(&p).unwrap();
        let back: RunManifest = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
