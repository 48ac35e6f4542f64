//! The run manifest written next to every training output.

use std::path::PathBuf;

use dfab_core::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub workers: usize,
    pub transport: String,
    /// `in-memory`, `ship` or `self-load`.
    pub data: String,
    pub partition_seed: u64,
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub target: String,
    pub rows: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub holdout: f64,
    pub seed: u64,
    pub train_rows: usize,
    pub holdout_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub model: PathBuf,
    pub report: PathBuf,
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    /// Final FIC per restart seed, when more than one run was made.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub restarts: Vec<RestartRecord>,
    pub iterations: usize,
    pub converged: bool,
    pub final_fic: Option<f64>,
    pub active_experts: usize,
    pub total_bytes: u64,
    pub holdout_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartRecord {
    pub seed: u64,
    pub iterations: usize,
    pub converged: bool,
    pub final_fic: Option<f64>,
}

/// Everything needed to rerun a training command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub input: InputRecord,
    pub split: SplitRecord,
    pub resumed_from: Option<PathBuf>,
    pub config: TrainConfig,
    pub cluster: ClusterRecord,
    pub outputs: OutputRecord,
    pub result: ResultRecord,
}

impl RunManifest {
    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }
}
