//! Run manifests: what produced a set of outputs, and a short hash of it
//! that every CSV row carries.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use fedfair_core::federation::ExperimentConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetFingerprint {
    pub records: usize,
    /// SHA-256 over the prepared split and group files, in a fixed order.
    pub sha256: String,
}

impl DatasetFingerprint {
    pub fn of_files(records: usize, files: &[PathBuf]) -> anyhow::Result<Self> {
        let mut h = Sha256::new();
        for f in files {
            let bytes = fs::read(f).with_context(|| format!("reading {}", f.display()))?;
            let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            h.update(name.as_bytes());
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
        Ok(Self {
            records,
            sha256: hex::encode(h.finalize()),
        })
    }
}

/// Extra description of a sweep, folded into the hash.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSpec {
    pub seeds: Vec<u64>,
    pub betas: Vec<f64>,
    pub deltas: Vec<f64>,
    pub lambdas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub dataset: DatasetFingerprint,
    pub code_version: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    /// Not part of the hash: moving a run does not change what it is.
    #[serde(skip)]
    pub output_dir: PathBuf,
}

#[derive(Serialize)]
struct Stamped<'a> {
    hash: String,
    output_dir: &'a Path,
    #[serde(flatten)]
    manifest: &'a RunManifest,
}

impl RunManifest {
    pub fn new(config: ExperimentConfig, dataset: DatasetFingerprint, output_dir: PathBuf) -> Self {
        Self {
            seed: config.seed,
            config,
            dataset,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            sweep: None,
            output_dir,
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("manifest serializes");
        let digest = Sha256::digest(&json);
        hex::encode(&digest[..8])
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let stamped = Stamped {
            hash: self.hash(),
            output_dir: &self.output_dir,
            manifest: self,
        };
        let text = serde_json::to_string_pretty(&stamped)?;
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
