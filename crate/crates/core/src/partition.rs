//! One worker's slice of the training data together with its variational
//! state.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gates::SplitGrid;
use crate::model::TaskKind;

/// Samples held by one worker plus the per-sample, per-expert matrices the EM
/// loop keeps next to them. All matrices are row-major `len() x n_experts`.
#[derive(Debug, Clone)]
pub struct WorkerPartition {
    x: Vec<f64>,
    y: Vec<f64>,
    dim: usize,
    task: TaskKind,
    /// Global sample index of each row; seeds per-sample initialization.
    sample_ids: Vec<usize>,
    n_experts: usize,
    /// Responsibilities q.
    pub q: Vec<f64>,
    /// Cached log path-likelihood plus expert log-likelihood.
    pub log_lik: Vec<f64>,
    /// Cached curvature weights of each expert's log-likelihood.
    pub scale: Vec<f64>,
    grid: Option<SplitGrid>,
    // Row-major `len() x dim`: number of grid thresholds <= the value.
    bins: Vec<u16>,
}

impl WorkerPartition {
    pub fn new(
        x: Vec<f64>,
        y: Vec<f64>,
        dim: usize,
        task: TaskKind,
        sample_ids: Vec<usize>,
        n_experts: usize,
    ) -> Result<Self> {
        if dim == 0 || x.len() != y.len() * dim || sample_ids.len() != y.len() {
            return Err(Error::contract("partition arrays have inconsistent shapes"));
        }
        if y.is_empty() {
            return Err(Error::contract("partition is empty"));
        }
        let cells = y.len() * n_experts;
        Ok(WorkerPartition {
            x,
            y,
            dim,
            task,
            sample_ids,
            n_experts,
            q: vec![0.0; cells],
            log_lik: vec![0.0; cells],
            scale: vec![0.0; cells],
            grid: None,
            bins: Vec::new(),
        })
    }

    /// The rows of `data` listed in `ids` (global indices).
    pub fn from_dataset(data: &Dataset, ids: &[usize], n_experts: usize) -> Result<Self> {
        let sub = data.select(ids);
        Self::new(sub.x, sub.y, data.dim, data.task, ids.to_vec(), n_experts)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn sample_ids(&self) -> &[usize] {
        &self.sample_ids
    }

    pub fn features(&self) -> &[f64] {
        &self.x
    }

    pub fn targets(&self) -> &[f64] {
        &self.y
    }

    #[inline]
    pub fn row(&self, n: usize) -> &[f64] {
        &self.x[n * self.dim..(n + 1) * self.dim]
    }

    #[inline]
    pub fn q_row(&self, n: usize) -> &[f64] {
        &self.q[n * self.n_experts..(n + 1) * self.n_experts]
    }

    pub fn q_column(&self, expert: usize) -> Vec<f64> {
        self.q.chunks_exact(self.n_experts).map(|r| r[expert]).collect()
    }

    pub fn grid(&self) -> Option<&SplitGrid> {
        self.grid.as_ref()
    }

    /// Installs the shared split grid and bins every feature value against it.
    pub fn set_grid(&mut self, grid: SplitGrid) -> Result<()> {
        if grid.dim() != self.dim {
            return Err(Error::contract(format!(
                "grid has {} dimensions, partition has {}",
                grid.dim(),
                self.dim
            )));
        }
        self.bins = self
            .x
            .chunks_exact(self.dim)
            .flat_map(|row| row.iter().enumerate().map(|(d, &v)| grid.bin_of(d, v) as u16))
            .collect();
        self.grid = Some(grid);
        Ok(())
    }

    #[inline]
    pub(crate) fn bin_row(&self, n: usize) -> &[u16] {
        &self.bins[n * self.dim..(n + 1) * self.dim]
    }
}
