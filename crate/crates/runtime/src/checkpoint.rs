//! Coordinator checkpoints: one TOML document per checkpoint plus one
//! responsibility file per worker, each referenced by its SHA-256 digest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dfab_core::gates::build_split_grid;
use dfab_core::{deserialize_model, serialize_model, ModelDocument, ModelParams, SplitGrid, TrainConfig};

use crate::error::{Error, Result};
use crate::report::IterationRecord;

const FORMAT: &str = "dfab-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRecord {
    pub tmax: usize,
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

impl GridRecord {
    pub fn of(grid: &SplitGrid) -> Self {
        GridRecord { tmax: grid.tmax, mins: grid.mins.clone(), maxs: grid.maxs.clone() }
    }

    pub fn rebuild(&self) -> Result<SplitGrid> {
        Ok(build_split_grid(&[(self.mins.clone(), self.maxs.clone())], self.tmax)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardRecord {
    pub worker: usize,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Doc {
    format: String,
    version: u32,
    iteration: usize,
    workers: usize,
    samples: usize,
    partition_seed: u64,
    config: TrainConfig,
    grid: GridRecord,
    fic: Vec<f64>,
    model: toml::Table,
    records: Vec<IterationRecord>,
    shards: Vec<ShardRecord>,
}

/// State after `iteration` completed iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: usize,
    pub workers: usize,
    pub samples: usize,
    pub partition_seed: u64,
    pub config: TrainConfig,
    pub grid: GridRecord,
    pub model: ModelParams,
    pub records: Vec<IterationRecord>,
    pub shards: Vec<ShardRecord>,
    /// Directory holding the document and the responsibility files.
    pub dir: PathBuf,
}

pub fn checkpoint_file_name(iteration: usize) -> String {
    format!("checkpoint-t{iteration:06}.toml")
}

impl Checkpoint {
    pub fn to_toml(&self) -> Result<String> {
        let model_text = serialize_model(&ModelDocument::bare(self.model.clone()))?;
        let model: toml::Table = toml::from_str(&model_text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let doc = Doc {
            format: FORMAT.into(),
            version: VERSION,
            iteration: self.iteration,
            workers: self.workers,
            samples: self.samples,
            partition_seed: self.partition_seed,
            config: self.config.clone(),
            grid: self.grid.clone(),
            fic: self.records.iter().map(|r| r.fic).collect(),
            model,
            records: self.records.clone(),
            shards: self.shards.clone(),
        };
        toml::to_string(&doc).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_toml(text: &str, dir: &Path) -> Result<Self> {
        let doc: Doc = toml::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if doc.format != FORMAT || doc.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint {} v{}", doc.format, doc.version)));
        }
        if doc.records.len() != doc.iteration || doc.shards.len() != doc.workers {
            return Err(Error::Checkpoint("checkpoint records do not match its iteration and worker count".into()));
        }
        if doc.fic.iter().zip(&doc.records).any(|(a, r)| a.to_bits() != r.fic.to_bits()) {
            return Err(Error::Checkpoint("objective history disagrees with the iteration records".into()));
        }
        let model_text = toml::to_string(&doc.model).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let model = deserialize_model(&model_text)?.model;
        Ok(Checkpoint {
            iteration: doc.iteration,
            workers: doc.workers,
            samples: doc.samples,
            partition_seed: doc.partition_seed,
            config: doc.config,
            grid: doc.grid,
            model,
            records: doc.records,
            shards: doc.shards,
            dir: dir.to_path_buf(),
        })
    }

    /// Writes the document next to the shard files; returns its path.
    pub fn save(&self) -> Result<PathBuf> {
        let path = self.dir.join(checkpoint_file_name(self.iteration));
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, dir)
    }

    /// The checkpoint with the highest iteration in `dir`, if any.
    pub fn latest_in(dir: &Path) -> Result<Option<PathBuf>> {
        let mut best: Option<(usize, PathBuf)> = None;
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if let Some(it) = name
                .strip_prefix("checkpoint-t")
                .and_then(|s| s.strip_suffix(".toml"))
                .and_then(|s| s.parse::<usize>().ok())
            {
                if best.as_ref().is_none_or(|(b, _)| it > *b) {
                    best = Some((it, path));
                }
            }
        }
        Ok(best.map(|(_, p)| p))
    }
}
