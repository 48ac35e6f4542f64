//! Seeded starting point of the EM loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::gates::SplitGrid;
use crate::model::{ExpertParams, GateParams, ModelParams, TaskKind, TreeTopology, PROB_FLOOR};
use crate::partition::WorkerPartition;

const GATE_STREAM_SALT: u64 = 0x6a09_e667_f3bc_c908;
const Q_JITTER: f64 = 0.01;

/// Starting expert intercept from the global target sum and count.
pub fn initial_intercept(task: TaskKind, target_sum: f64, count: f64) -> f64 {
    let mean = target_sum / count;
    match task {
        TaskKind::Regression => mean,
        TaskKind::Classification => {
            let p = ((mean + 1.0) / 2.0).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            (p / (1.0 - p)).ln()
        }
    }
}

/// Complete tree whose gates split on a random non-constant feature at a
/// random grid threshold, with zero-weight experts at the target mean.
pub fn init_model(cfg: &TrainConfig, grid: &SplitGrid, target_sum: f64, count: f64) -> Result<ModelParams> {
    if !(count > 0.0) {
        return Err(Error::EmptyDataset);
    }
    let topology = TreeTopology::complete(cfg.depth)?;
    let splittable: Vec<usize> = (0..grid.dim()).filter(|&d| !grid.thresholds[d].is_empty()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ GATE_STREAM_SALT);
    let gates = (0..topology.n_gates())
        .map(|_| {
            if splittable.is_empty() {
                return GateParams { gamma: 0, threshold: grid.mins[0], g: cfg.init_gate_prob };
            }
            let gamma = splittable[rng.random_range(0..splittable.len())];
            let cands = &grid.thresholds[gamma];
            GateParams {
                gamma,
                threshold: cands[rng.random_range(0..cands.len())],
                g: cfg.init_gate_prob,
            }
        })
        .collect();
    let intercept = initial_intercept(cfg.task, target_sum, count);
    let experts = vec![ExpertParams::constant(grid.dim(), intercept, 1.0); topology.n_experts()];
    ModelParams::new(cfg.task, cfg.d_beta, topology, gates, experts)
}

/// Near-uniform responsibility row for one sample, a function of the seed and
/// the sample's global index only.
pub fn init_responsibility_row(row: &mut [f64], seed: u64, sample_id: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample_id as u64);
    let base = 1.0 / row.len() as f64;
    for v in row.iter_mut() {
        *v = base + rng.random::<f64>() * Q_JITTER;
    }
    let sum: f64 = row.iter().sum();
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn init_responsibilities(part: &mut WorkerPartition, seed: u64) {
    let e = part.n_experts();
    let ids = part.sample_ids().to_vec();
    for (row, id) in part.q.chunks_exact_mut(e).zip(ids) {
        init_responsibility_row(row, seed, id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::build_split_grid;

    #[test]
    fn rows_depend_on_sample_id_only() {
        let mut a = vec![0.0; 4];
        let mut b = vec![0.0; 4];
        init_responsibility_row(&mut a, 7, 12);
        init_responsibility_row(&mut b, 7, 12);
        assert_eq!(a, b);
        init_responsibility_row(&mut b, 7, 13);
        assert_ne!(a, b);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(a.iter().all(|&v| (v - 0.25).abs() < 0.01));
    }

    #[test]
    fn gates_use_splittable_dimensions() {
        let grid = build_split_grid(&[(vec![0.0, 1.0, 0.0], vec![1.0, 1.0, 2.0])], 8).unwrap();
        let cfg = TrainConfig { depth: 4, ..Default::default() };
        let m = init_model(&cfg, &grid, 10.0, 4.0).unwrap();
        assert_eq!(m.n_experts(), 16);
        for g in &m.gates {
            assert_ne!(g.gamma, 1);
            assert!(grid.thresholds[g.gamma].contains(&g.threshold));
            assert_eq!(g.g, 0.8);
        }
        assert!(m.experts.iter().all(|e| e.intercept == 2.5 && e.sigma2 == 1.0 && e.cardinality() == 0));
    }

    #[test]
    fn classification_intercept_is_log_odds() {
        // three positives, one negative
        let b = initial_intercept(TaskKind::Classification, 2.0, 4.0);
        assert!((b - 3f64.ln()).abs() < 1e-12);
    }
}
