//! Distributed training runtime: a coordinator, workers that each own one
//! data partition, and the messages between them.

pub mod checkpoint;
pub mod codec;
pub mod coordinator;
pub mod error;
pub mod partition;
pub mod protocol;
pub mod report;
pub mod transport;
pub mod worker;

use std::path::PathBuf;

use dfab_core::{Dataset, TrainConfig};

pub use checkpoint::Checkpoint;
pub use coordinator::{coordinate, CheckpointPolicy, Job, TrainOutcome};
pub use error::{Error, Result};
pub use partition::{partition_dataset, partition_indices};
pub use protocol::{Frame, Shape, Tag};
pub use report::{account_bytes, IterationRecord, Traffic, TrainReport};
pub use transport::{serve_tcp, DirectTransport, SocketTransport, ThreadTransport, Transport};
pub use worker::{PartitionLoader, Worker};

/// How in-process workers are run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransportKind {
    /// Called in place on the coordinator's thread; nothing is encoded.
    Direct,
    /// One thread per worker exchanging encoded frames.
    #[default]
    Threads,
}

/// How workers obtain their rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DataMode {
    /// Handed over in memory before the run starts.
    #[default]
    InMemory,
    /// Sent in a `PartitionData` frame.
    Ship,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    pub workers: usize,
    pub transport: TransportKind,
    pub data: DataMode,
    pub partition_seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            workers: 1,
            transport: TransportKind::default(),
            data: DataMode::default(),
            partition_seed: 0,
            checkpoint_dir: None,
            checkpoint_every: 20,
        }
    }
}

impl ClusterConfig {
    fn job(&self, config: TrainConfig, dim: usize) -> Job {
        Job {
            config,
            dim,
            partition_seed: self.partition_seed,
            checkpoints: self.checkpoint_dir.clone().map(|dir| CheckpointPolicy { dir, every: self.checkpoint_every }),
        }
    }
}

fn run_local(data: &Dataset, job: &Job, cluster: &ClusterConfig, resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
    let parts = partition_dataset(data, cluster.workers, cluster.partition_seed)?;
    let (workers, shipped): (Vec<Worker>, Option<&[(Dataset, Vec<usize>)]>) = match cluster.data {
        DataMode::InMemory => (parts.iter().cloned().map(|(d, ids)| Worker::with_data(d, ids)).collect(), None),
        DataMode::Ship => ((0..cluster.workers).map(|_| Worker::awaiting_data()).collect(), Some(&parts)),
    };
    match cluster.transport {
        TransportKind::Direct => coordinate(&mut DirectTransport::new(workers), job, shipped, resume),
        TransportKind::Threads => coordinate(&mut ThreadTransport::spawn(workers), job, shipped, resume),
    }
}

/// Trains on `data` with in-process workers.
pub fn run_training(data: &Dataset, config: &TrainConfig, cluster: &ClusterConfig) -> Result<TrainOutcome> {
    if config.task != data.task {
        return Err(Error::Config("configuration and data disagree on the task".into()));
    }
    run_local(data, &cluster.job(config.clone(), data.dim), cluster, None)
}

/// Continues the run saved in `checkpoint` on the same data. `max_iters`
/// overrides the saved iteration budget.
pub fn resume(data: &Dataset, checkpoint: &Checkpoint, cluster: &ClusterConfig, max_iters: Option<usize>) -> Result<TrainOutcome> {
    let mut config = checkpoint.config.clone();
    if let Some(m) = max_iters {
        config.max_iters = m;
    }
    run_local(data, &cluster.job(config, data.dim), cluster, Some(checkpoint))
}

/// Every run of [`run_restarts`] plus the index of the one kept.
#[derive(Debug, Clone)]
pub struct Restarts {
    pub runs: Vec<TrainOutcome>,
    pub best: usize,
}

impl Restarts {
    pub fn best(&self) -> &TrainOutcome {
        &self.runs[self.best]
    }

    pub fn into_best(mut self) -> TrainOutcome {
        self.runs.swap_remove(self.best)
    }
}

/// Index of the run to keep: the highest final FIC among converged runs, or
/// among all runs when none converged. Earlier runs win ties.
pub fn pick_best(runs: &[TrainOutcome]) -> Option<usize> {
    let any_converged = runs.iter().any(|r| r.report.converged);
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in runs.iter().enumerate() {
        if any_converged && !r.report.converged {
            continue;
        }
        let fic = r.report.final_fic.unwrap_or(f64::NEG_INFINITY);
        if best.is_none_or(|(_, b)| fic > b) {
            best = Some((i, fic));
        }
    }
    best.map(|(i, _)| i)
}

/// Trains once per seed in `seeds` (each replacing `config.seed`) and keeps
/// the run chosen by [`pick_best`]. Selection looks only at the training
/// objective. Checkpoints of each run go to a `seed-<s>` subdirectory.
pub fn run_restarts(data: &Dataset, config: &TrainConfig, cluster: &ClusterConfig, seeds: &[u64]) -> Result<Restarts> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one restart seed is required".into()));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cluster = ClusterConfig {
            checkpoint_dir: cluster.checkpoint_dir.as_ref().map(|d| d.join(format!("seed-{seed}"))),
            ..cluster.clone()
        };
        if let Some(dir) = &cluster.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::Checkpoint(format!("creating {}: {e}", dir.display())))?;
        }
        log::info!("restart with seed {seed}");
        runs.push(run_training(data, &TrainConfig { seed, ..config.clone() }, &cluster)?);
    }
    let best = pick_best(&runs).expect("runs is not empty");
    Ok(Restarts { runs, best })
}
