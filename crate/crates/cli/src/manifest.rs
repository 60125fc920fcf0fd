//! Run manifest: configuration hash and per-stage checksums and timings.
//!
//! Timestamps live only here, so every other file in the output directory is
//! a pure function of the configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub seed: u64,
    /// path → SHA-256
    pub inputs: BTreeMap<String, String>,
    /// file name within the output directory → SHA-256
    pub outputs: BTreeMap<String, String>,
    pub seconds: f64,
    pub finished_unix: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(CliError::MissingFile(path.to_path_buf()));
    }
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Records what one command read and wrote.
pub struct Stage<'a> {
    cfg: &'a RunConfig,
    name: &'static str,
    pub seed: u64,
    started: Instant,
    record: StageRecord,
}

impl<'a> Stage<'a> {
    pub fn new(cfg: &'a RunConfig, name: &'static str) -> Self {
        let seed = cfg.stage_seed(name);
        log::info!("stage {name}: seed {seed}");
        Self {
            cfg,
            name,
            seed,
            started: Instant::now(),
            record: StageRecord {
                seed,
                ..StageRecord::default()
            },
        }
    }

    pub fn read(&mut self, path: &Path) -> Result<String> {
        let text = read_text(path)?;
        self.record
            .inputs
            .insert(path.display().to_string(), sha256_hex(text.as_bytes()));
        Ok(text)
    }

    /// Writes `content` to the output directory.
    pub fn write(&mut self, name: &str, content: &str) -> Result<PathBuf> {
        let path = self.cfg.output(name);
        write_bytes(&path, content.as_bytes())?;
        self.record
            .outputs
            .insert(name.to_string(), sha256_hex(content.as_bytes()));
        Ok(path)
    }

    /// Writes `content` to an explicit path (simulated inputs may live
    /// outside the output directory).
    pub fn write_to(&mut self, path: &Path, content: &str) -> Result<()> {
        write_bytes(path, content.as_bytes())?;
        self.record
            .outputs
            .insert(path.display().to_string(), sha256_hex(content.as_bytes()));
        Ok(())
    }

    /// Stores the stage record in the manifest, replacing an earlier run of
    /// the same stage.
    pub fn finish(mut self) -> Result<()> {
        self.record.seconds = self.started.elapsed().as_secs_f64();
        self.record.finished_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let path = self.cfg.output(MANIFEST_FILE);
        let mut manifest: RunManifest = match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
            Err(_) => RunManifest::default(),
        };
        let hash = self.cfg.hash();
        if manifest.config_hash != hash {
            manifest.stages.clear();
        }
        manifest.artifact_version = env!("CARGO_PKG_VERSION").to_string();
        manifest.config_hash = hash;
        manifest.seed = self.cfg.seed;
        manifest.stages.insert(self.name.to_string(), self.record);
        let text = serde_json::to_string_pretty(&manifest).expect("serializable") + "\n";
        write_bytes(&path, text.as_bytes())
    }
}
