//! Run directory layout, prerequisite checks and the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};

/// A file produced by one subcommand and consumed by later ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Artifact {
    pub file: &'static str,
    pub producer: &'static str,
}

macro_rules! artifacts {
    ($($name:ident = $file:literal by $producer:literal;)*) => {
        $(pub const $name: Artifact = Artifact { file: $file, producer: $producer };)*
    };
}

artifacts! {
    CONFIG = "config.json" by "gen-data";
    DATASET = "dataset.jsonl" by "gen-data";
    DYNAMICS = "dynamics.json" by "train-dynamics";
    BISIM = "bisim.json" by "train-bisim";
    RUN_STATE = "bats_state.json" by "stitch";
    MDP = "mdp.json" by "stitch";
    STITCH_LOG = "stitch_log.jsonl" by "stitch";
    ITERATIONS = "iterations.csv" by "stitch";
    HARVEST = "harvest.jsonl" by "clone";
    HARVEST_RETURNS = "harvest_returns.csv" by "clone";
    POLICY = "policy.json" by "clone";
    RAW_POLICY = "policy_raw.json" by "clone --raw";
    EVALUATION = "evaluation.json" by "evaluate";
    RESIDUALS = "residuals.csv" by "evaluate";
    BOUNDS = "bounds.json" by "verify-bounds";
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    /// File name (relative to the run directory) to SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

pub struct Workspace {
    pub dir: PathBuf,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Workspace {
    pub fn create(dir: impl Into<PathBuf>) -> CliResult<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Workspace { dir })
    }

    pub fn path(&self, a: Artifact) -> PathBuf {
        self.dir.join(a.file)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Path of a prerequisite, or an error naming the subcommand that makes it.
    pub fn require(&self, a: Artifact) -> CliResult<PathBuf> {
        let p = self.path(a);
        if p.is_file() {
            Ok(p)
        } else {
            Err(CliError::MissingArtifact {
                path: p,
                producer: a.producer,
            })
        }
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let p = self.file(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&p, contents).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    pub fn load_manifest(&self) -> CliResult<Manifest> {
        let p = self.file(MANIFEST_FILE);
        if !p.is_file() {
            return Ok(Manifest::default());
        }
        let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
    }

    /// Record checksums of `files` (names relative to the run directory).
    pub fn record(&self, config: &PipelineConfig, files: &[&str]) -> CliResult<Manifest> {
        let mut m = self.load_manifest()?;
        let hash = config.hash();
        if !m.config_hash.is_empty() && m.config_hash != hash {
            log::warn!("config changed since earlier stages of this run; checksums now mix configurations");
        }
        m.config_hash = hash;
        m.seed = config.seed;
        for f in files {
            m.artifacts.insert((*f).to_string(), sha256_file(&self.file(f))?);
        }
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        self.write(MANIFEST_FILE, text + "\n")?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_prerequisite_names_its_producer() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::create(dir.path()).unwrap();
        let err = ws.require(POLICY).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("bats clone"));
    }
}
