//! Input resolution, loading and the train/holdout preparation shared by the
//! coordinator and self-loading workers.

use std::path::{Path, PathBuf};

use anyhow::Context;
use dfab_core::data::{load_csv, shuffle_split, standardization_of};
use dfab_core::{Dataset, Standardization, TaskKind};
use sha2::{Digest, Sha256};

pub const DATA_DIR_ENV: &str = "DFAB_DATA_DIR";

/// Relative paths are taken from `DFAB_DATA_DIR` when it is set.
pub fn resolve(path: &Path) -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) if path.is_relative() => Path::new(&dir).join(path),
        _ => path.to_path_buf(),
    }
}

/// Git-style object hash: SHA-256 over `blob <len>\0` and the file bytes.
pub fn content_hash(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(&bytes);
    Ok(hex::encode(h.finalize()))
}

pub struct Prepared {
    /// Standardized training rows.
    pub train: Dataset,
    /// Held-out rows on the raw scale.
    pub holdout: Option<Dataset>,
    pub record: Standardization,
}

/// Splits off the holdout (if any) and standardizes the rest with its own
/// statistics.
pub fn prepare(data: &Dataset, holdout: f64, split_seed: u64) -> anyhow::Result<Prepared> {
    anyhow::ensure!((0.0..1.0).contains(&holdout), "holdout fraction {holdout} not in [0, 1)");
    let (train, holdout) = if holdout > 0.0 {
        let (train, test) = shuffle_split(data, 1.0 - holdout, split_seed)?;
        (train, Some(test))
    } else {
        (data.clone(), None)
    };
    let record = standardization_of(&train)?;
    Ok(Prepared { train: train.apply_standardization(&record), holdout, record })
}

pub fn load(path: &Path, target: &str, task: TaskKind) -> anyhow::Result<Dataset> {
    load_csv(path, target, task).with_context(|| format!("loading {}", path.display()))
}
