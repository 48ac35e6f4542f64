//! Shared split-candidate grid and histogram-based Bernoulli gate updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{clamp_prob, GateParams, TreeTopology};
use crate::partition::WorkerPartition;

pub const MAX_TMAX: usize = 1 << 16;

/// Per-dimension split thresholds shared by every worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitGrid {
    pub tmax: usize,
    /// Strictly increasing interior bin edges per dimension (empty when the
    /// dimension is constant).
    pub thresholds: Vec<Vec<f64>>,
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

impl SplitGrid {
    pub fn dim(&self) -> usize {
        self.thresholds.len()
    }

    /// Candidate slots per dimension, `tmax - 1`.
    pub fn slots(&self) -> usize {
        self.tmax - 1
    }

    /// Number of thresholds `<= v`, i.e. the bin `v` falls in.
    #[inline]
    pub fn bin_of(&self, d: usize, v: f64) -> usize {
        self.thresholds[d].partition_point(|&t| t <= v)
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.iter().all(Vec::is_empty)
    }
}

/// Per-dimension minimum and maximum over one partition.
pub fn local_minmax(part: &WorkerPartition) -> Result<(Vec<f64>, Vec<f64>)> {
    if part.is_empty() {
        return Err(Error::contract("min/max of an empty partition"));
    }
    let mut mins = vec![f64::INFINITY; part.dim()];
    let mut maxs = vec![f64::NEG_INFINITY; part.dim()];
    for n in 0..part.len() {
        for (d, &v) in part.row(n).iter().enumerate() {
            mins[d] = mins[d].min(v);
            maxs[d] = maxs[d].max(v);
        }
    }
    Ok((mins, maxs))
}

/// Reduces per-worker ranges and splits each global range into `tmax`
/// equal-width bins; the `tmax - 1` interior edges become the candidates.
pub fn build_split_grid(reports: &[(Vec<f64>, Vec<f64>)], tmax: usize) -> Result<SplitGrid> {
    let (first, rest) = reports
        .split_first()
        .ok_or_else(|| Error::contract("no worker reported a range"))?;
    if !(2..=MAX_TMAX).contains(&tmax) {
        return Err(Error::contract(format!("tmax {tmax} not in 2..={MAX_TMAX}")));
    }
    let dim = first.0.len();
    let mut mins = first.0.clone();
    let mut maxs = first.1.clone();
    for (lo, hi) in rest {
        if lo.len() != dim || hi.len() != dim {
            return Err(Error::contract("workers reported ranges of different dimension"));
        }
        for d in 0..dim {
            mins[d] = mins[d].min(lo[d]);
            maxs[d] = maxs[d].max(hi[d]);
        }
    }
    let thresholds = mins
        .iter()
        .zip(&maxs)
        .map(|(&lo, &hi)| {
            let mut edges: Vec<f64> = Vec::with_capacity(tmax - 1);
            if hi > lo {
                let width = (hi - lo) / tmax as f64;
                for k in 1..tmax {
                    let t = lo + k as f64 * width;
                    if t > lo && t <= hi && edges.last().is_none_or(|&prev| t > prev) {
                        edges.push(t);
                    }
                }
            }
            edges
        })
        .collect();
    Ok(SplitGrid {
        tmax,
        thresholds,
        mins,
        maxs,
    })
}

/// Histogram sums for one gate: `left[d * slots + k]` is the left-subtree
/// responsibility of samples with `x[d] < t_k`, `right[..]` the
/// right-subtree responsibility of samples with `x[d] >= t_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateStats {
    pub slots: usize,
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

impl GateStats {
    pub fn zeros(dim: usize, slots: usize) -> Self {
        GateStats {
            slots,
            left: vec![0.0; dim * slots],
            right: vec![0.0; dim * slots],
        }
    }

    pub fn add(&mut self, other: &GateStats) {
        for (a, b) in self.left.iter_mut().zip(&other.left) {
            *a += b;
        }
        for (a, b) in self.right.iter_mut().zip(&other.right) {
            *a += b;
        }
    }
}

/// Gate statistics for every gate in one pass over the partition. Pass-through
/// gates get all-zero statistics so the result always has `n_gates` entries.
pub fn local_gate_stats_all(part: &WorkerPartition, topology: &TreeTopology) -> Result<Vec<GateStats>> {
    let grid = part
        .grid()
        .ok_or_else(|| Error::contract("gate statistics need the split grid"))?;
    let dim = part.dim();
    let slots = grid.slots();
    let bins = grid.tmax;
    let live: Vec<usize> = topology.live_gates().collect();

    // Per live gate: bin masses, layout [d * bins + b].
    let mut hist_left = vec![vec![0.0; dim * bins]; live.len()];
    let mut hist_right = vec![vec![0.0; dim * bins]; live.len()];
    for n in 0..part.len() {
        let q = part.q_row(n);
        let bin_row = part.bin_row(n);
        for (slot, &gate) in live.iter().enumerate() {
            let lm: f64 = q[topology.left_experts(gate)].iter().sum();
            let rm: f64 = q[topology.right_experts(gate)].iter().sum();
            if lm == 0.0 && rm == 0.0 {
                continue;
            }
            let (hl, hr) = (&mut hist_left[slot], &mut hist_right[slot]);
            for (d, &b) in bin_row.iter().enumerate() {
                hl[d * bins + b as usize] += lm;
                hr[d * bins + b as usize] += rm;
            }
        }
    }

    let mut out = vec![GateStats::zeros(dim, slots); topology.n_gates()];
    for (slot, &gate) in live.iter().enumerate() {
        let stats = &mut out[gate];
        for d in 0..dim {
            let cands = grid.thresholds[d].len();
            let hl = &hist_left[slot][d * bins..(d + 1) * bins];
            let hr = &hist_right[slot][d * bins..(d + 1) * bins];
            // x < t_k  <=>  bin <= k
            let mut acc = 0.0;
            for k in 0..cands {
                acc += hl[k];
                stats.left[d * slots + k] = acc;
            }
            // x >= t_k  <=>  bin >= k + 1
            let mut acc = 0.0;
            for k in (0..cands).rev() {
                acc += hr[k + 1];
                stats.right[d * slots + k] = acc;
            }
        }
    }
    Ok(out)
}

/// Statistics of a single gate.
pub fn local_gate_stats(part: &WorkerPartition, gate: usize, topology: &TreeTopology) -> Result<GateStats> {
    if topology.is_passthrough(gate) {
        let grid = part
            .grid()
            .ok_or_else(|| Error::contract("gate statistics need the split grid"))?;
        return Ok(GateStats::zeros(part.dim(), grid.slots()));
    }
    Ok(local_gate_stats_all(part, topology)?.swap_remove(gate))
}

/// Split score as a function of the optimal gate probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitScore {
    /// `N (g ln g + (1 - g) ln(1 - g))`: mass-scaled negative Bernoulli
    /// entropy, rewarding decisive splits.
    #[default]
    NegEntropy,
    /// `N (g ln(1 - g) + (1 - g) ln g)`.
    Swapped,
}

impl SplitScore {
    #[inline]
    pub fn score(self, g: f64, mass: f64) -> f64 {
        let (a, b) = (g.ln(), (1.0 - g).ln());
        match self {
            SplitScore::NegEntropy => mass * (g * a + (1.0 - g) * b),
            SplitScore::Swapped => mass * (g * b + (1.0 - g) * a),
        }
    }
}

/// Sums per-worker statistics and returns the best-scoring split, ties going
/// to the lower feature and then the lower threshold. `None` when no
/// dimension has a candidate or the gate carries no mass.
pub fn select_gate<'a>(
    stats: impl IntoIterator<Item = &'a GateStats>,
    n_beta: f64,
    grid: &SplitGrid,
    score: SplitScore,
) -> Option<GateParams> {
    let mut iter = stats.into_iter();
    let mut total = iter.next()?.clone();
    for s in iter {
        total.add(s);
    }
    if !(n_beta > 0.0) {
        return None;
    }
    let slots = grid.slots();
    let mut best: Option<(f64, GateParams)> = None;
    for (d, cands) in grid.thresholds.iter().enumerate() {
        for (k, &t) in cands.iter().enumerate() {
            let idx = d * slots + k;
            let g = clamp_prob((total.left[idx] + total.right[idx]) / n_beta);
            let xi = score.score(g, n_beta);
            if best.as_ref().is_none_or(|(b, _)| xi > *b) {
                best = Some((xi, GateParams { gamma: d, threshold: t, g }));
            }
        }
    }
    best.map(|(_, p)| p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TaskKind;

    fn grid01(tmax: usize) -> SplitGrid {
        build_split_grid(&[(vec![0.0], vec![1.0])], tmax).unwrap()
    }

    #[test]
    fn minmax_examples() {
        let p = WorkerPartition::new(vec![0.3, 7.0], vec![0.0], 2, TaskKind::Regression, vec![0], 1).unwrap();
        assert_eq!(local_minmax(&p).unwrap(), (vec![0.3, 7.0], vec![0.3, 7.0]));
        let p = WorkerPartition::new(vec![0.1, 2.0, 0.9, 2.0], vec![0.0, 0.0], 2, TaskKind::Regression, vec![0, 1], 1).unwrap();
        assert_eq!(local_minmax(&p).unwrap(), (vec![0.1, 2.0], vec![0.9, 2.0]));
    }

    #[test]
    fn grid_examples() {
        assert_eq!(grid01(4).thresholds[0], vec![0.25, 0.5, 0.75]);
        let g = build_split_grid(&[(vec![2.0], vec![2.0])], 4).unwrap();
        assert!(g.thresholds[0].is_empty());
        let g = build_split_grid(&[(vec![0.0], vec![0.5]), (vec![0.5], vec![1.0])], 4).unwrap();
        assert_eq!((g.mins[0], g.maxs[0]), (0.0, 1.0));
        assert!(build_split_grid(&[], 4).is_err());
        assert!(build_split_grid(&[(vec![0.0], vec![1.0])], 1).is_err());
    }

    #[test]
    fn bins_follow_boundary_convention() {
        let g = grid01(4);
        assert_eq!(g.bin_of(0, 0.1), 0);
        assert_eq!(g.bin_of(0, 0.25), 1);
        assert_eq!(g.bin_of(0, 0.9), 3);
    }

    fn partition_1d(xs: &[f64], masses: &[(f64, f64)]) -> (WorkerPartition, TreeTopology) {
        let mut p = WorkerPartition::new(xs.to_vec(), vec![0.0; xs.len()], 1, TaskKind::Regression, (0..xs.len()).collect(), 2).unwrap();
        for (n, &(l, r)) in masses.iter().enumerate() {
            p.q[2 * n] = l;
            p.q[2 * n + 1] = r;
        }
        p.set_grid(grid01(4)).unwrap();
        (p, TreeTopology::complete(1).unwrap())
    }

    #[test]
    fn stats_single_sample_below_all() {
        let (p, t) = partition_1d(&[0.1], &[(1.0, 0.0)]);
        let s = local_gate_stats(&p, 0, &t).unwrap();
        assert_eq!(s.left, vec![1.0, 1.0, 1.0]);
        assert_eq!(s.right, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn stats_sample_on_threshold_goes_right() {
        let (p, t) = partition_1d(&[0.5], &[(0.0, 1.0)]);
        let s = local_gate_stats(&p, 0, &t).unwrap();
        // thresholds 0.25, 0.5, 0.75: x >= t for the first two
        assert_eq!(s.right, vec![1.0, 1.0, 0.0]);
        assert_eq!(s.left, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn stats_four_samples() {
        // brute force: rho_L(t) = 0.5 * #{x < t}, rho_R(t) = 0.5 * #{x >= t}
        let xs = [0.1, 0.3, 0.6, 0.9];
        let (p, t) = partition_1d(&xs, &[(0.5, 0.5); 4]);
        let s = local_gate_stats(&p, 0, &t).unwrap();
        let thresholds = [0.25, 0.5, 0.75];
        let brute_l: Vec<f64> = thresholds.iter().map(|&t| xs.iter().filter(|&&x| x < t).count() as f64 * 0.5).collect();
        let brute_r: Vec<f64> = thresholds.iter().map(|&t| xs.iter().filter(|&&x| x >= t).count() as f64 * 0.5).collect();
        assert_eq!(brute_l, vec![0.5, 1.0, 1.5]);
        assert_eq!(brute_r, vec![1.5, 1.0, 0.5]);
        assert_eq!(s.left, brute_l);
        assert_eq!(s.right, brute_r);
    }

    #[test]
    fn select_gate_uniform_ties_pick_first() {
        let xs = [0.1, 0.3, 0.6, 0.9];
        let (p, t) = partition_1d(&xs, &[(0.5, 0.5); 4]);
        let s = local_gate_stats(&p, 0, &t).unwrap();
        let g = select_gate([&s], 2.0 * 2.0, p.grid().unwrap(), SplitScore::NegEntropy).unwrap();
        assert_eq!((g.gamma, g.threshold), (0, 0.25));
        assert_eq!(g.g, 0.5);
    }

    #[test]
    fn select_gate_finds_consistent_split() {
        let xs = [0.1, 0.3, 0.6, 0.9];
        let (p, t) = partition_1d(&xs, &[(1.0, 0.0), (1.0, 0.0), (0.0, 1.0), (0.0, 1.0)]);
        let s = local_gate_stats(&p, 0, &t).unwrap();
        let g = select_gate([&s], 4.0, p.grid().unwrap(), SplitScore::NegEntropy).unwrap();
        assert_eq!(g.threshold, 0.5);
        assert!((g.g - (1.0 - 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn select_gate_degenerate_grid_is_noop() {
        let g = build_split_grid(&[(vec![2.0], vec![2.0])], 4).unwrap();
        let s = GateStats::zeros(1, 3);
        assert_eq!(select_gate([&s], 3.0, &g, SplitScore::NegEntropy), None);
    }

    #[test]
    fn score_extremes() {
        let s = SplitScore::NegEntropy;
        assert!((s.score(0.5, 10.0) + 10.0 * 2f64.ln()).abs() < 1e-12);
        assert!(s.score(clamp_prob(1.0), 10.0) > s.score(0.7, 10.0));
        assert!(s.score(clamp_prob(0.0), 10.0) > s.score(0.3, 10.0));
    }
}
