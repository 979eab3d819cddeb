//! Run manifests: everything needed to re-run a seed bit-identically.

use crate::config::ExperimentConfig;
use fedroute_core::server::Variant;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// Harness version that produced the run.
    pub version: String,
    pub seed: u64,
    pub variant: Variant,
    /// Fully resolved configuration snapshot.
    pub config: ExperimentConfig,
    /// Resolved hyperparameters actually used (no hidden defaults).
    pub hyper: fedroute_core::client::TrainHyper,
    pub rounds_file: PathBuf,
    pub metrics_file: PathBuf,
    pub checkpoint_file: PathBuf,
    pub eval_file: PathBuf,
    /// Sampled client ids per round, in round order.
    pub sampled_per_round: Vec<Vec<u64>>,
    /// Unix seconds when the run finished.
    pub finished_at: u64,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<(), crate::CliError> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, crate::CliError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
