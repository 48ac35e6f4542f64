//! Per-iteration training records and traffic accounting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::protocol::Tag;

/// Bytes moved in one phase of a run, both directions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Traffic {
    /// Coordinator to workers.
    pub sent: u64,
    /// Workers to coordinator.
    pub received: u64,
    pub by_tag: BTreeMap<String, u64>,
}

impl Traffic {
    pub fn record_sent(&mut self, tag: Tag, bytes: usize) {
        self.sent += bytes as u64;
        *self.by_tag.entry(tag.name().to_string()).or_default() += bytes as u64;
    }

    pub fn record_received(&mut self, tag: Tag, bytes: usize) {
        self.received += bytes as u64;
        *self.by_tag.entry(tag.name().to_string()).or_default() += bytes as u64;
    }

    pub fn total(&self) -> u64 {
        self.sent + self.received
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Objective of the model entering this iteration.
    pub fic: f64,
    pub loglik: f64,
    pub gate_penalty: f64,
    pub expert_penalty: f64,
    /// Active experts after this iteration's shrinkage.
    pub active_experts: usize,
    /// Support size per expert slot after the refit (0 for inactive slots).
    pub cardinalities: Vec<usize>,
    /// Whether the objective change ended training at this iteration.
    pub converged: bool,
    pub traffic: Traffic,
    /// Wall time, left out of checkpoints so they stay reproducible.
    #[serde(skip)]
    pub millis: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub workers: usize,
    pub setup: Traffic,
    pub iterations: Vec<IterationRecord>,
    /// Objective of the returned model.
    pub final_fic: Option<f64>,
    pub converged: bool,
    /// Iteration the run restarted after, when resumed from a checkpoint.
    pub resumed_from: Option<usize>,
    pub checkpoints: Vec<std::path::PathBuf>,
}

impl TrainReport {
    pub fn fic_history(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.fic).collect()
    }

    pub fn total_bytes(&self) -> u64 {
        self.setup.total() + self.iterations.iter().map(|r| r.traffic.total()).sum::<u64>()
    }
}

/// Bytes of one recorded iteration split by message tag, or `None` when the
/// iteration was not recorded.
pub fn account_bytes(report: &TrainReport, iteration: usize) -> Option<&BTreeMap<String, u64>> {
    report.iterations.iter().find(|r| r.iteration == iteration).map(|r| &r.traffic.by_tag)
}
