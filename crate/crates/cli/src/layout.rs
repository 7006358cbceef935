//! Fixed file layout of a run directory, plus its checksum index.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use selfkd_core::synth::{fnv1a_hex, DatasetKind};
use selfkd_core::train::Stage;

use crate::error::{CliError, Result};

pub const INDEX_FILE: &str = "artifacts.json";
pub const TIMINGS_FILE: &str = "timings.json";

/// File stem of a stage checkpoint; the audio SFT stage is keyed by α.
pub fn model_tag(stage: Stage, alpha: Option<f64>) -> String {
    match (stage, alpha) {
        (Stage::VisionAudioSft, Some(a)) => format!("{stage}-alpha{a}"),
        _ => stage.name().to_string(),
    }
}

#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn config_rel() -> String {
        "config.json".into()
    }

    pub fn manifest_rel() -> String {
        "data/manifest.json".into()
    }

    pub fn dataset_rel(kind: DatasetKind) -> String {
        format!("data/{}", kind.file_name())
    }

    pub fn checkpoint_rel(tag: &str) -> String {
        format!("checkpoints/{tag}.json")
    }

    pub fn log_rel(tag: &str) -> String {
        format!("logs/{tag}.csv")
    }

    pub fn log_json_rel(tag: &str) -> String {
        format!("logs/{tag}.json")
    }

    pub fn eval_rel(tag: &str) -> String {
        format!("eval/{tag}.json")
    }

    pub fn profile_csv_rel(tag: &str) -> String {
        format!("profiles/{tag}.csv")
    }

    pub fn profile_json_rel(tag: &str) -> String {
        format!("profiles/{tag}.json")
    }

    pub fn sweep_rel() -> String {
        "ablation/sweep.csv".into()
    }

    pub fn sweep_json_rel() -> String {
        "ablation/sweep.json".into()
    }

    fn ensure_parent(path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        Ok(())
    }

    /// Writes `bytes` to `rel` without indexing it.
    pub fn write_plain(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(rel);
        Self::ensure_parent(&path)?;
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))
    }

    /// Writes an artifact and records its checksum; returns the checksum.
    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<String> {
        self.write_plain(rel, bytes)?;
        self.record(rel)
    }

    /// Prepares the parent directory of an artifact written by other code.
    pub fn prepare(&self, rel: &str) -> Result<PathBuf> {
        let path = self.path(rel);
        Self::ensure_parent(&path)?;
        Ok(path)
    }

    /// Hashes an existing file into the index.
    pub fn record(&self, rel: &str) -> Result<String> {
        let path = self.path(rel);
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        let sum = fnv1a_hex(&bytes);
        let mut index = self.index()?;
        index.insert(rel.to_string(), sum.clone());
        let text = serde_json::to_string_pretty(&index).expect("index serializes") + "\n";
        self.write_plain(INDEX_FILE, text.as_bytes())?;
        Ok(sum)
    }

    pub fn index(&self) -> Result<BTreeMap<String, String>> {
        let path = self.path(INDEX_FILE);
        if !path.exists() {
            return Ok(BTreeMap::new());
        }
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|_| CliError::Corrupt(vec![path]))
    }

    /// Index entries whose file is missing or no longer matches.
    pub fn verify(&self, rels: &[String]) -> Result<Vec<PathBuf>> {
        let index = self.index()?;
        let mut bad = Vec::new();
        for rel in rels {
            let path = self.path(rel);
            let ok = match (fs::read(&path), index.get(rel)) {
                (Ok(bytes), Some(sum)) => fnv1a_hex(&bytes) == *sum,
                _ => false,
            };
            if !ok {
                bad.push(path);
            }
        }
        Ok(bad)
    }

    pub fn timings(&self) -> BTreeMap<String, f64> {
        fs::read_to_string(self.path(TIMINGS_FILE)).ok().and_then(|t| serde_json::from_str(&t).ok()).unwrap_or_default()
    }

    /// Wall-clock seconds are kept out of the checksum index.
    pub fn record_timing(&self, key: &str, seconds: f64) -> Result<()> {
        let mut t = self.timings();
        t.insert(key.to_string(), seconds);
        let text = serde_json::to_string_pretty(&t).expect("timings serialize") + "\n";
        self.write_plain(TIMINGS_FILE, text.as_bytes())
    }
}
