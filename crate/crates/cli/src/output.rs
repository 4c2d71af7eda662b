//! Output directory writer with a hash manifest.

use std::fs;
use std::path::{Path, PathBuf};

use jano_core::latents::encode_latent;
use jano_core::LatentTensor;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
    /// False for files holding wall-clock measurements.
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub command: String,
    pub files: Vec<ManifestEntry>,
}

/// Collects everything a command writes so the manifest can list it.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            entries: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn write(&mut self, rel: &str, bytes: &[u8], deterministic: bool) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.entries.retain(|e| e.path != rel);
        self.entries.push(ManifestEntry {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
            deterministic,
        });
        Ok(())
    }

    pub fn write_latent(&mut self, rel: &str, latent: &LatentTensor) -> Result<()> {
        let bytes = encode_latent(latent)?;
        self.write(rel, &bytes, true)
    }

    pub fn write_csv<R: Serialize>(&mut self, rel: &str, rows: &[R]) -> Result<()> {
        self.csv_inner(rel, rows, true)
    }

    /// CSV of wall-clock measurements, flagged as non-reproducible.
    pub fn write_timing_csv<R: Serialize>(&mut self, rel: &str, rows: &[R]) -> Result<()> {
        self.csv_inner(rel, rows, false)
    }

    fn csv_inner<R: Serialize>(&mut self, rel: &str, rows: &[R], deterministic: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Invariant(format!("csv buffer: {e}")))?;
        self.write(rel, &bytes, deterministic)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T, deterministic: bool) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(rel, &bytes, deterministic)
    }

    /// Writes the manifest, sorted by path, and returns it.
    pub fn finish(mut self, experiment: &str, command: &str) -> Result<Manifest> {
        self.entries.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            experiment: experiment.to_string(),
            command: command.to_string(),
            files: self.entries,
        };
        let path = self.root.join(MANIFEST_NAME);
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        Ok(manifest)
    }
}
