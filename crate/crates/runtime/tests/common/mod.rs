//! Helpers shared by the integration targets.
#![allow(dead_code)]

use std::collections::BTreeMap;

use dfab_core::data::{standardize, synth_generate};
use dfab_core::gates::{build_split_grid, local_gate_stats_all, local_minmax, select_gate};
use dfab_core::objective::{estep_aggregate, fic_aggregate, local_estep, local_loglik};
use dfab_core::{Dataset, EStats, GateParams, ModelParams, SplitScore, SyntheticSpec, WorkerPartition};
use dfab_runtime::{partition_dataset, Error, Frame, Tag, ThreadTransport, Transport, Worker};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Wraps a transport and logs every frame that crosses it as
/// `(sent, worker, tag, iteration)`. Optionally fails one receive.
pub struct Tracing<T> {
    pub inner: T,
    pub log: Vec<(bool, usize, Tag, u32)>,
    pub fail_at: Option<u32>,
}

impl<T: Transport> Transport for Tracing<T> {
    fn workers(&self) -> usize {
        self.inner.workers()
    }

    fn send(&mut self, worker: usize, frame: &Frame) -> dfab_runtime::Result<usize> {
        self.log.push((true, worker, frame.tag, frame.iteration));
        self.inner.send(worker, frame)
    }

    fn recv(&mut self, worker: usize) -> dfab_runtime::Result<(Frame, usize)> {
        let (f, n) = self.inner.recv(worker)?;
        if self.fail_at == Some(f.iteration) && f.tag == Tag::GateStatsReport && worker == 1 {
            return Err(Error::WorkerFailed { worker, message: "injected".into() });
        }
        self.log.push((false, worker, f.tag, f.iteration));
        Ok((f, n))
    }

    fn shutdown(&mut self) -> dfab_runtime::Result<()> {
        self.inner.shutdown()
    }
}

pub fn traced(d: &Dataset, workers: usize, partition_seed: u64, fail_at: Option<u32>) -> Tracing<ThreadTransport> {
    let parts = partition_dataset(d, workers, partition_seed).unwrap();
    let w = parts.into_iter().map(|(d, ids)| Worker::with_data(d, ids)).collect();
    Tracing { inner: ThreadTransport::spawn(w), log: Vec::new(), fail_at }
}

/// Checks the barrier and per-worker request/reply order of a trace.
pub fn check_trace(log: &[(bool, usize, Tag, u32)], workers: usize, iteration: u32) -> Result<(), String> {
    let mut last_reply: BTreeMap<u32, usize> = BTreeMap::new();
    let mut first_send: BTreeMap<u32, usize> = BTreeMap::new();
    for (i, &(send, _, _, it)) in log.iter().enumerate() {
        if send {
            first_send.entry(it).or_insert(i);
        } else {
            last_reply.insert(it, i);
        }
    }
    for (&it, &last) in &last_reply {
        if let Some(&next) = first_send.get(&(it + 1)) {
            if last > next {
                return Err(format!("iteration {} started before iteration {it} finished", it + 1));
            }
        }
    }
    let expected = [
        (Tag::BroadcastModel, vec![Tag::LoglikReport]),
        (Tag::BroadcastPenalty, vec![Tag::EStatsReport]),
        (Tag::ShrinkDirective, vec![Tag::EStatsReport, Tag::GateStatsReport]),
        (Tag::BroadcastPenalty, vec![Tag::ExpertCandidateReport]),
        (Tag::BroadcastFeatureSet, vec![Tag::ExpertFitReport]),
    ];
    let want: Vec<(bool, Tag)> =
        expected.iter().flat_map(|(s, rs)| std::iter::once((true, *s)).chain(rs.iter().map(|r| (false, *r)))).collect();
    for w in 0..workers {
        let got: Vec<(bool, Tag)> = log.iter().filter(|e| e.1 == w && e.3 == iteration).map(|e| (e.0, e.2)).collect();
        if got != want {
            return Err(format!("worker {w} saw {got:?}"));
        }
    }
    Ok(())
}

pub struct Aggregates {
    pub fic: f64,
    pub estats: EStats,
    pub q: Vec<f64>,
    pub gates: Vec<Option<GateParams>>,
}

/// FIC, post-E-step statistics, responsibilities and gate choices for a
/// fixed model and global `q`, computed over `workers` partitions.
pub fn aggregate(data: &Dataset, model: &ModelParams, q: &[f64], workers: usize, seed: u64) -> Aggregates {
    let e = model.n_experts();
    let mut parts: Vec<WorkerPartition> = partition_dataset(data, workers, seed)
        .unwrap()
        .into_iter()
        .map(|(_, ids)| {
            let mut p = WorkerPartition::from_dataset(data, &ids, e).unwrap();
            for (n, &id) in ids.iter().enumerate() {
                p.q[n * e..(n + 1) * e].copy_from_slice(&q[id * e..(id + 1) * e]);
            }
            p
        })
        .collect();
    let ranges: Vec<_> = parts.iter().map(|p| local_minmax(p).unwrap()).collect();
    let grid = build_split_grid(&ranges, 8).unwrap();
    for p in &mut parts {
        p.set_grid(grid.clone()).unwrap();
    }
    let lls: Vec<_> = parts.iter_mut().map(|p| local_loglik(p, model).unwrap()).collect();
    let stats = estep_aggregate(lls.iter().map(|l| &l.stats)).unwrap();
    let ll: Vec<f64> = lls.iter().map(|l| l.total()).collect();
    let fic = fic_aggregate(&ll, &stats, model).unwrap().fic;
    let locals: Vec<EStats> = parts.iter_mut().map(|p| local_estep(p, model, Some(&stats)).unwrap()).collect();
    let estats = estep_aggregate(&locals).unwrap();
    let gate_stats: Vec<_> = parts.iter().map(|p| local_gate_stats_all(p, &model.topology).unwrap()).collect();
    let gates = (0..model.n_gates())
        .map(|i| select_gate(gate_stats.iter().map(|s| &s[i]), estats.nbeta[i], &grid, SplitScore::NegEntropy))
        .collect();
    let mut global = vec![0.0; q.len()];
    for p in &parts {
        for (n, &id) in p.sample_ids().iter().enumerate() {
            global[id * e..(id + 1) * e].copy_from_slice(p.q_row(n));
        }
    }
    Aggregates { fic, estats, q: global, gates }
}

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-300)
}

/// Compares two aggregates; `Err` names the first disagreement.
pub fn same_aggregates(a: &Aggregates, b: &Aggregates) -> Result<(), String> {
    if !close(a.fic, b.fic) {
        return Err(format!("fic {} vs {}", a.fic, b.fic));
    }
    let flat = |s: &EStats| [s.nphi.clone(), s.nbeta.clone(), s.nphi_scaled.clone()].concat();
    if let Some((x, y)) = flat(&a.estats).into_iter().zip(flat(&b.estats)).find(|(x, y)| !close(*x, *y)) {
        return Err(format!("statistics {x} vs {y}"));
    }
    if a.q.iter().zip(&b.q).any(|(x, y)| (x - y).abs() > 1e-12) {
        return Err("responsibilities differ".into());
    }
    for (x, y) in a.gates.iter().zip(&b.gates) {
        let same = match (x, y) {
            (Some(x), Some(y)) => x.gamma == y.gamma && x.threshold == y.threshold && close(x.g, y.g),
            (None, None) => true,
            _ => false,
        };
        if !same {
            return Err(format!("gate selection {x:?} vs {y:?}"));
        }
    }
    Ok(())
}

/// Standardized synthetic data, a perturbed generator model with soft gates,
/// and random normalized responsibilities.
pub fn random_state(seed: u64, n: usize) -> (Dataset, ModelParams, Vec<f64>) {
    let spec = SyntheticSpec { depth: 2, experts: 4, dim: 3, n, nonzero: (1, 2), seed, ..Default::default() };
    let (raw, mut model) = synth_generate(&spec).unwrap();
    let data = standardize(&raw).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for g in &mut model.gates {
        g.g = rng.random_range(0.1..0.9);
        g.threshold = rng.random_range(-1.0..1.0);
    }
    for e in &mut model.experts {
        e.sigma2 = rng.random_range(0.2..2.0);
    }
    let mut q: Vec<f64> = (0..n * 4).map(|_| rng.random_range(0.01..1.0)).collect();
    for row in q.chunks_exact_mut(4) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    (data, model, q)
}
