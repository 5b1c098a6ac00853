//! Run manifests: everything needed to reproduce a CLI run.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ExperimentConfig, Stage};
use crate::detector::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub arguments: Vec<String>,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub versions: BTreeMap<String, String>,
    /// Output file name to SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn new(command: &str, arguments: Vec<String>, cfg: &ExperimentConfig) -> Self {
        let seeds = [
            ("root", cfg.seed),
            ("dataset", cfg.stage_seed(Stage::Dataset)),
            ("detector", cfg.stage_seed(Stage::Detector)),
            ("attack", cfg.stage_seed(Stage::Attack)),
            ("baseline", cfg.stage_seed(Stage::Baseline)),
            ("defense", cfg.stage_seed(Stage::Defense)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let versions = [
            ("advfusion", env!("CARGO_PKG_VERSION").to_string()),
            ("checkpoint", format!("{} v{}", String::from_utf8_lossy(CHECKPOINT_MAGIC), CHECKPOINT_VERSION)),
            ("manifest", "1".to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Manifest { command: command.to_string(), arguments, config_hash: cfg.hash(), seeds, versions, outputs: BTreeMap::new() }
    }

    /// Records the hash of `dir/name`.
    pub fn add_output(&mut self, dir: &Path, name: &str) -> Result<()> {
        let h = file_sha256(&dir.join(name))?;
        self.outputs.insert(name.to_string(), h);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        Ok(serde_json::from_str(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_seeds_hashes_and_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        let mut m = Manifest::new("attack", vec!["--target".into(), "both".into()], &cfg);
        fs::write(dir.path().join("a.txt"), b"abc").unwrap();
        m.add_output(dir.path(), "a.txt").unwrap();
        assert_eq!(m.outputs["a.txt"], "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(m.seeds["root"], cfg.seed);
        assert_eq!(m.config_hash, cfg.hash());
        m.write(dir.path()).unwrap();
        assert_eq!(Manifest::read(dir.path()).unwrap(), m);
    }
}
