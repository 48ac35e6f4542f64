//! The information-criterion objective, the penalized E-step and expert
//! shrinkage, each split into a per-partition pass and a coordinator fold.

use crate::error::{Error, Result};
use crate::model::{sigmoid, softplus, ModelParams, TaskKind, TreeTopology};
use crate::partition::WorkerPartition;

/// Floor applied to every mass before it enters a logarithm or a denominator.
pub const MASS_FLOOR: f64 = 1e-12;

/// Responsibility masses: per expert (`nphi`), per gate subtree (`nbeta`) and
/// per expert weighted by the curvature cache (`nphi_scaled`).
#[derive(Debug, Clone, PartialEq)]
pub struct EStats {
    pub nphi: Vec<f64>,
    pub nbeta: Vec<f64>,
    pub nphi_scaled: Vec<f64>,
}

impl EStats {
    pub fn zeros(n_experts: usize, n_gates: usize) -> Self {
        EStats {
            nphi: vec![0.0; n_experts],
            nbeta: vec![0.0; n_gates],
            nphi_scaled: vec![0.0; n_experts],
        }
    }

    pub fn n_experts(&self) -> usize {
        self.nphi.len()
    }

    pub fn n_gates(&self) -> usize {
        self.nbeta.len()
    }

    /// Gate masses implied by the expert masses.
    fn fill_nbeta(&mut self, topology: &TreeTopology) {
        for i in 0..self.nbeta.len() {
            self.nbeta[i] = self.nphi[topology.experts_under(i)].iter().sum();
        }
    }

    pub fn add(&mut self, other: &EStats) -> Result<()> {
        if other.n_experts() != self.n_experts() || other.n_gates() != self.n_gates() {
            return Err(Error::contract(format!(
                "statistics shapes differ: ({}, {}) vs ({}, {})",
                self.n_experts(),
                self.n_gates(),
                other.n_experts(),
                other.n_gates()
            )));
        }
        for (a, b) in self.nphi.iter_mut().zip(&other.nphi) {
            *a += b;
        }
        for (a, b) in self.nbeta.iter_mut().zip(&other.nbeta) {
            *a += b;
        }
        for (a, b) in self.nphi_scaled.iter_mut().zip(&other.nphi_scaled) {
            *a += b;
        }
        Ok(())
    }
}

/// Elementwise sum of per-worker statistics.
pub fn estep_aggregate<'a>(locals: impl IntoIterator<Item = &'a EStats>) -> Result<EStats> {
    let mut iter = locals.into_iter();
    let mut total = iter
        .next()
        .ok_or_else(|| Error::contract("no statistics to aggregate"))?
        .clone();
    for s in iter {
        total.add(s)?;
    }
    Ok(total)
}

/// Masses of the current responsibilities and curvature cache.
pub fn mass_stats(part: &WorkerPartition, topology: &TreeTopology) -> EStats {
    let e = part.n_experts();
    let mut stats = EStats::zeros(e, topology.n_gates());
    for (q, s) in part.q.chunks_exact(e).zip(part.scale.chunks_exact(e)) {
        for j in 0..e {
            stats.nphi[j] += q[j];
            stats.nphi_scaled[j] += q[j] * s[j];
        }
    }
    stats.fill_nbeta(topology);
    stats
}

/// One worker's contribution to the objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalLoglik {
    /// `sum_n sum_j q L`.
    pub expected: f64,
    /// `-sum_n sum_j q ln q`.
    pub entropy: f64,
    /// Masses of the current responsibilities under the refreshed curvature.
    pub stats: EStats,
}

impl LocalLoglik {
    pub fn total(&self) -> f64 {
        self.expected + self.entropy
    }
}

/// Recomputes the log path-likelihood and curvature caches from `model` and
/// returns the expected complete log-likelihood plus responsibility entropy.
pub fn local_loglik(part: &mut WorkerPartition, model: &ModelParams) -> Result<LocalLoglik> {
    let e = part.n_experts();
    if e != model.n_experts() || part.dim() != model.dim() {
        return Err(Error::contract("partition and model shapes differ"));
    }
    let active: Vec<usize> = model.topology.active_experts().collect();
    let table = model.log_branch_table();
    // Sparse supports and the Gaussian normalizer are fixed for the pass.
    let support: Vec<Vec<(usize, f64)>> = model
        .experts
        .iter()
        .map(|phi| phi.support().into_iter().map(|d| (d, phi.weights[d])).collect())
        .collect();
    let norm: Vec<f64> = model
        .experts
        .iter()
        .map(|phi| match model.task {
            TaskKind::Regression => {
                assert!(phi.sigma2 > 0.0, "expert variance must be positive");
                -0.5 * (2.0 * std::f64::consts::PI * phi.sigma2).ln()
            }
            TaskKind::Classification => 0.0,
        })
        .collect();
    let mut expected = 0.0;
    let mut entropy = 0.0;
    let mut l_row = vec![0.0; e];
    let mut s_row = vec![0.0; e];
    for n in 0..part.len() {
        let (x, y) = (part.row(n), part.targets()[n]);
        for &j in &active {
            let phi = &model.experts[j];
            let f = phi.intercept + support[j].iter().map(|&(d, w)| w * x[d]).sum::<f64>();
            let (ll, scale) = match model.task {
                TaskKind::Regression => {
                    let r = y - f;
                    (norm[j] - r * r / (2.0 * phi.sigma2), 1.0 / phi.sigma2)
                }
                TaskKind::Classification => {
                    let mu = sigmoid(y * f);
                    (-softplus(-y * f), mu * (1.0 - mu))
                }
            };
            l_row[j] = model.path_log_prob_with(&table, x, j) + ll;
            s_row[j] = scale;
        }
        let q = &part.q[n * e..(n + 1) * e];
        for &j in &active {
            if q[j] > 0.0 {
                expected += q[j] * l_row[j];
                entropy -= q[j] * q[j].ln();
            }
        }
        part.log_lik[n * e..(n + 1) * e].copy_from_slice(&l_row);
        part.scale[n * e..(n + 1) * e].copy_from_slice(&s_row);
    }
    Ok(LocalLoglik {
        expected,
        entropy,
        stats: mass_stats(part, &model.topology),
    })
}

/// The composed objective and its parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FicReport {
    pub fic: f64,
    pub loglik: f64,
    pub gate_penalty: f64,
    pub expert_penalty: f64,
}

/// Sums worker log-likelihoods and subtracts the gate and expert penalties.
/// Pass-through gates and weightless experts contribute nothing.
pub fn fic_aggregate(ll: &[f64], stats: &EStats, model: &ModelParams) -> Result<FicReport> {
    if ll.is_empty() {
        return Err(Error::contract("no worker log-likelihoods"));
    }
    if stats.n_experts() != model.n_experts() || stats.n_gates() != model.n_gates() {
        return Err(Error::contract("statistics do not match the model"));
    }
    let loglik: f64 = ll.iter().sum();
    let gate_penalty: f64 = model
        .topology
        .live_gates()
        .map(|i| model.d_beta / 2.0 * stats.nbeta[i].max(MASS_FLOOR).ln())
        .sum();
    let expert_penalty: f64 = model
        .topology
        .active_experts()
        .map(|j| {
            let d = model.experts[j].cardinality();
            if d == 0 {
                0.0
            } else {
                d as f64 / 2.0 * stats.nphi_scaled[j].max(MASS_FLOOR).ln()
            }
        })
        .sum();
    Ok(FicReport {
        fic: loglik - gate_penalty - expert_penalty,
        loglik,
        gate_penalty,
        expert_penalty,
    })
}

/// Per-expert additive path penalty and per-sample curvature coefficient of
/// the exponentiated E-step regularizer.
pub fn estep_penalties(model: &ModelParams, prev: &EStats) -> (Vec<f64>, Vec<f64>) {
    let e = model.n_experts();
    let mut path = vec![0.0; e];
    let mut coef = vec![0.0; e];
    for j in model.topology.active_experts() {
        path[j] = model
            .topology
            .path(j)
            .iter()
            .map(|step| -model.d_beta / (2.0 * prev.nbeta[step.gate].max(MASS_FLOOR)))
            .sum();
        let d = model.experts[j].cardinality() as f64;
        coef[j] = -d / (2.0 * prev.nphi_scaled[j].max(MASS_FLOOR));
    }
    (path, coef)
}

/// Penalized responsibility update from the cached log-likelihoods. With
/// `prev = None` the penalties are skipped. Returns the new local masses.
pub fn local_estep(part: &mut WorkerPartition, model: &ModelParams, prev: Option<&EStats>) -> Result<EStats> {
    let e = part.n_experts();
    if e != model.n_experts() {
        return Err(Error::contract("partition and model shapes differ"));
    }
    if let Some(p) = prev {
        if p.n_experts() != e || p.n_gates() != model.n_gates() {
            return Err(Error::contract("previous statistics do not match the model"));
        }
    }
    let active: Vec<usize> = model.topology.active_experts().collect();
    let (path, coef) = match prev {
        Some(p) => estep_penalties(model, p),
        None => (vec![0.0; e], vec![0.0; e]),
    };
    let mut scores = vec![0.0; e];
    for n in 0..part.len() {
        let l = &part.log_lik[n * e..(n + 1) * e];
        let s = &part.scale[n * e..(n + 1) * e];
        let mut max = f64::NEG_INFINITY;
        for &j in &active {
            scores[j] = l[j] + path[j] + coef[j] * s[j];
            max = max.max(scores[j]);
        }
        if !max.is_finite() {
            return Err(Error::Numerical(format!("non-finite responsibility score in row {n}")));
        }
        let q = &mut part.q[n * e..(n + 1) * e];
        q.fill(0.0);
        let mut sum = 0.0;
        for &j in &active {
            q[j] = (scores[j] - max).exp();
            sum += q[j];
        }
        if !(sum > 0.0) {
            return Err(Error::Numerical(format!("responsibility row {n} vanished")));
        }
        for &j in &active {
            q[j] /= sum;
        }
    }
    Ok(mass_stats(part, &model.topology))
}

/// Active experts whose mass is below `eps`. If every active expert would go,
/// the heaviest survives (lowest index on ties).
pub fn decide_shrink(stats: &EStats, eps: f64, topology: &TreeTopology) -> Vec<usize> {
    let active: Vec<usize> = topology.active_experts().collect();
    let mut eliminated: Vec<usize> = active.iter().copied().filter(|&j| stats.nphi[j] < eps).collect();
    if eliminated.len() == active.len() {
        let mut keep = active[0];
        for &j in &active[1..] {
            if stats.nphi[j] > stats.nphi[keep] {
                keep = j;
            }
        }
        eliminated.retain(|&j| j != keep);
    }
    eliminated
}

/// Zeroes the eliminated columns and renormalizes every row over the
/// survivors of `topology`. A row with no surviving mass falls back to the
/// softmax of its cached log-likelihoods.
pub fn apply_shrink(part: &mut WorkerPartition, eliminated: &[usize], topology: &TreeTopology) -> Result<()> {
    let e = part.n_experts();
    if topology.n_experts() != e {
        return Err(Error::contract("topology does not match the partition"));
    }
    if eliminated.is_empty() {
        return Ok(());
    }
    let survivors: Vec<usize> = topology.active_experts().collect();
    for n in 0..part.len() {
        let row = n * e..(n + 1) * e;
        let q = &mut part.q[row.clone()];
        for &j in eliminated {
            q[j] = 0.0;
        }
        let sum: f64 = survivors.iter().map(|&j| q[j]).sum();
        if sum > 0.0 {
            for &j in &survivors {
                q[j] /= sum;
            }
        } else {
            let l = &part.log_lik[row];
            let max = survivors.iter().map(|&j| l[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for &j in &survivors {
                q[j] = (l[j] - max).exp();
                total += q[j];
            }
            for &j in &survivors {
                q[j] /= total;
            }
        }
    }
    Ok(())
}

/// Single-process composition of the shrink decision, model pruning and
/// renormalization of every partition.
pub fn shrink(
    stats: &EStats,
    eps: f64,
    model: &ModelParams,
    parts: &mut [WorkerPartition],
) -> Result<(Vec<usize>, ModelParams)> {
    let eliminated = decide_shrink(stats, eps, &model.topology);
    let pruned = model.prune(&eliminated)?;
    for part in parts.iter_mut() {
        apply_shrink(part, &eliminated, &pruned.topology)?;
    }
    Ok((eliminated, pruned))
}
