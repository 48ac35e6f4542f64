//! Piecewise sparse linear models: a binary tree of Bernoulli threshold gates
//! routing samples to L0-sparse linear experts, learned by penalized EM.
//!
//! The per-partition passes (`local_*`, `foba_*`, refits) and the coordinator
//! folds (`*_aggregate`, `select_gate`, `majority_vote`, `average_weights`) are
//! kept separate so a runtime can place them on different nodes.

pub mod config;
pub mod data;
pub mod document;
pub mod error;
pub mod eval;
pub mod experts;
pub mod gates;
pub mod init;
pub mod model;
pub mod objective;
pub mod partition;
pub mod serial;

pub use config::TrainConfig;
pub use data::{Dataset, Standardization, SyntheticSpec};
pub use document::{deserialize_model, serialize_model, ModelDocument};
pub use error::{Error, Result};
pub use experts::{FobaLimits, PenalizedObjective};
pub use gates::{GateStats, SplitGrid, SplitScore};
pub use model::{ExpertParams, GateParams, ModelParams, Prediction, TaskKind, TreeTopology};
pub use objective::{EStats, FicReport};
pub use partition::WorkerPartition;
