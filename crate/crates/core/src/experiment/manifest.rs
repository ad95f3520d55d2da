//! Reproducibility manifest: config echo, certificates, stage timings and a
//! content-hashed file inventory.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use crate::error::Result;
use crate::features::KappaCertificate;
use crate::sa::StepSchedule;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPointSummary {
    pub theta_star: Vec<f64>,
    pub residual: f64,
    pub solver_iters: usize,
    pub g_condition: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifact_version: String,
    pub config: ExperimentConfig,
    pub kappa: Option<KappaCertificate>,
    pub mixing_time: Option<usize>,
    pub schedule: Option<StepSchedule>,
    pub fixed_point: Option<FixedPointSummary>,
    /// Seconds per stage; the only nondeterministic content.
    pub stage_wall_times: BTreeMap<String, f64>,
    pub threads: Option<usize>,
    pub files: Vec<FileEntry>,
}

impl Manifest {
    pub fn new(config: ExperimentConfig) -> Self {
        Manifest {
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            kappa: None,
            mixing_time: None,
            schedule: None,
            fixed_point: None,
            stage_wall_times: BTreeMap::new(),
            threads: None,
            files: Vec::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        super::write_json(&dir.join(MANIFEST_FILE), self)
    }

    /// Rehashes every regular file in `dir` except the manifest itself.
    pub fn refresh_inventory(&mut self, dir: &Path) -> Result<()> {
        self.files = inventory(dir)?;
        Ok(())
    }

    /// Hash over the file inventory, independent of timings.
    pub fn inventory_digest(&self) -> String {
        let mut h = Sha256::new();
        for f in &self.files {
            h.update(f.path.as_bytes());
            h.update([0]);
            h.update(f.sha256.as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn inventory(dir: &Path) -> Result<Vec<FileEntry>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name == MANIFEST_FILE || !entry.file_type()?.is_file() {
            continue;
        }
        let bytes = fs::read(entry.path())?;
        files.push(FileEntry { path: name, sha256: sha256_bytes(&bytes), bytes: bytes.len() as u64 });
    }
    files.sort();
    Ok(files)
}
