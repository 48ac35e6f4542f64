//! Gated binary trees of sparse linear experts.
//!
//! Gates are stored in heap order (root at 0, children of `i` at `2i + 1` and
//! `2i + 2`). Experts are the leaves of the complete tree, numbered left to
//! right, so the experts below any gate form a contiguous index range.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to gate probabilities before they enter a logarithm.
pub const PROB_FLOOR: f64 = 1e-6;

const MAX_DEPTH: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Regression,
    Classification,
}

impl TaskKind {
    pub fn accepts_target(self, y: f64) -> bool {
        match self {
            TaskKind::Regression => y.is_finite(),
            TaskKind::Classification => y == 1.0 || y == -1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Regression => "regression",
            TaskKind::Classification => "classification",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "regression" => Ok(TaskKind::Regression),
            "classification" | "binary-classification" => Ok(TaskKind::Classification),
            other => Err(format!("unknown task kind {other:?}")),
        }
    }
}

/// One gate on the root-to-leaf path of an expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathStep {
    pub gate: usize,
    /// Whether the expert sits in the gate's left subtree.
    pub left: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeTopology {
    depth: u32,
    active: Vec<bool>,
    passthrough: Vec<bool>,
    // Live gates only: pass-through gates never appear on a path.
    paths: Vec<Vec<PathStep>>,
}

impl TreeTopology {
    pub fn complete(depth: u32) -> Result<Self> {
        if depth == 0 || depth > MAX_DEPTH {
            return Err(Error::InvalidModel(format!(
                "tree depth must be in 1..={MAX_DEPTH}, got {depth}"
            )));
        }
        let experts = 1usize << depth;
        Ok(Self::build(depth, vec![true; experts]))
    }

    /// Rebuilds a topology from an active-expert mask, checking a stated
    /// pass-through mask against the one the active mask implies.
    pub fn from_masks(depth: u32, active: Vec<bool>, passthrough: Option<&[bool]>) -> Result<Self> {
        let full = Self::complete(depth)?;
        if active.len() != full.n_experts() {
            return Err(Error::InvalidModel(format!(
                "depth {depth} needs {} experts, got {}",
                full.n_experts(),
                active.len()
            )));
        }
        if !active.iter().any(|&a| a) {
            return Err(Error::NoActiveExperts);
        }
        let topo = Self::build(depth, active);
        if let Some(stated) = passthrough {
            if stated.len() != topo.n_gates() {
                return Err(Error::InvalidModel(format!(
                    "depth {depth} needs {} gates, got {}",
                    topo.n_gates(),
                    stated.len()
                )));
            }
            if let Some(i) = (0..topo.n_gates()).find(|&i| stated[i] != topo.passthrough[i]) {
                return Err(Error::InvalidModel(format!(
                    "gate {i}: pass-through flag {} disagrees with the active-expert mask",
                    stated[i]
                )));
            }
        }
        Ok(topo)
    }

    fn build(depth: u32, active: Vec<bool>) -> Self {
        let experts = active.len();
        let gates = experts - 1;
        let mut topo = TreeTopology {
            depth,
            active,
            passthrough: vec![false; gates],
            paths: Vec::new(),
        };
        topo.passthrough = (0..gates)
            .map(|i| {
                let left = topo.left_experts(i).any(|j| topo.active[j]);
                let right = topo.right_experts(i).any(|j| topo.active[j]);
                !(left && right)
            })
            .collect();
        topo.paths = (0..experts)
            .map(|j| {
                let mut steps = Vec::with_capacity(depth as usize);
                let mut node = gates + j;
                while node > 0 {
                    let parent = (node - 1) / 2;
                    if !topo.passthrough[parent] {
                        steps.push(PathStep {
                            gate: parent,
                            left: node == 2 * parent + 1,
                        });
                    }
                    node = parent;
                }
                steps.reverse();
                steps
            })
            .collect();
        topo
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn n_experts(&self) -> usize {
        self.active.len()
    }

    pub fn n_gates(&self) -> usize {
        self.passthrough.len()
    }

    pub fn is_active(&self, expert: usize) -> bool {
        self.active[expert]
    }

    pub fn active_mask(&self) -> &[bool] {
        &self.active
    }

    pub fn active_experts(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_experts()).filter(move |&j| self.active[j])
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn is_passthrough(&self, gate: usize) -> bool {
        self.passthrough[gate]
    }

    pub fn passthrough_mask(&self) -> &[bool] {
        &self.passthrough
    }

    /// Gates that still split active experts on both sides.
    pub fn live_gates(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_gates()).filter(move |&i| !self.passthrough[i])
    }

    /// Live gates on the root-to-leaf path of `expert`.
    pub fn path(&self, expert: usize) -> &[PathStep] {
        &self.paths[expert]
    }

    /// All experts (active or not) in the subtree of `gate`.
    pub fn experts_under(&self, gate: usize) -> Range<usize> {
        let level = usize::BITS - 1 - (gate + 1).leading_zeros();
        let offset = gate + 1 - (1usize << level);
        let span = 1usize << (self.depth - level);
        offset * span..(offset + 1) * span
    }

    pub fn left_experts(&self, gate: usize) -> Range<usize> {
        let r = self.experts_under(gate);
        r.start..r.start + r.len() / 2
    }

    pub fn right_experts(&self, gate: usize) -> Range<usize> {
        let r = self.experts_under(gate);
        r.start + r.len() / 2..r.end
    }

    /// Marks `eliminated` experts inactive and recomputes pass-through gates.
    pub fn prune(&self, eliminated: &[usize]) -> Result<Self> {
        let mut active = self.active.clone();
        for &j in eliminated {
            if j >= active.len() {
                return Err(Error::contract(format!("expert {j} out of range")));
            }
            active[j] = false;
        }
        if !active.iter().any(|&a| a) {
            return Err(Error::ShrinkageCollapse);
        }
        Ok(Self::build(self.depth, active))
    }
}

/// Bernoulli threshold gate: probability `g` of taking the left branch when
/// `x[gamma] < threshold`, `1 - g` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub gamma: usize,
    pub threshold: f64,
    pub g: f64,
}

/// Probability the gate emits for its left subtree. A sample exactly on the
/// threshold takes the `x >= t` side.
#[inline]
pub fn gate_prob(x: &[f64], gate: &GateParams) -> f64 {
    assert!(
        gate.gamma < x.len(),
        "gate feature {} out of range for {} features",
        gate.gamma,
        x.len()
    );
    if x[gate.gamma] < gate.threshold {
        gate.g
    } else {
        1.0 - gate.g
    }
}

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertParams {
    pub weights: Vec<f64>,
    /// Unpenalized; never counted in the cardinality.
    pub intercept: f64,
    /// Noise variance; unused by classification experts.
    pub sigma2: f64,
}

impl ExpertParams {
    pub fn constant(dim: usize, intercept: f64, sigma2: f64) -> Self {
        ExpertParams {
            weights: vec![0.0; dim],
            intercept,
            sigma2,
        }
    }

    #[inline]
    pub fn linear(&self, x: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    /// Number of nonzero weights (the L0 norm).
    pub fn cardinality(&self) -> usize {
        self.weights.iter().filter(|&&w| w != 0.0).count()
    }

    pub fn support(&self) -> Vec<usize> {
        (0..self.weights.len()).filter(|&d| self.weights[d] != 0.0).collect()
    }
}

/// Numerically stable `ln(1 + e^z)`.
#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn expert_log_likelihood(y: f64, x: &[f64], phi: &ExpertParams, task: TaskKind) -> f64 {
    let f = phi.linear(x);
    match task {
        TaskKind::Regression => {
            assert!(phi.sigma2 > 0.0, "expert variance must be positive");
            let r = y - f;
            -0.5 * (2.0 * std::f64::consts::PI * phi.sigma2).ln() - r * r / (2.0 * phi.sigma2)
        }
        TaskKind::Classification => -softplus(-y * f),
    }
}

/// Per-sample curvature weight of an expert's log-likelihood.
pub fn scaling_factor(y: f64, x: &[f64], phi: &ExpertParams, task: TaskKind) -> f64 {
    match task {
        TaskKind::Regression => 1.0 / phi.sigma2,
        TaskKind::Classification => {
            let mu = sigmoid(y * phi.linear(x));
            mu * (1.0 - mu)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub expert: usize,
    /// Regression output, or P(y = +1) for classification.
    pub value: f64,
    pub task: TaskKind,
}

impl Prediction {
    /// Sign label for classification; the raw value for regression.
    pub fn label(&self) -> f64 {
        match self.task {
            TaskKind::Regression => self.value,
            TaskKind::Classification => {
                if self.value >= 0.5 {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub task: TaskKind,
    /// Free parameters per gate in the gate penalty.
    pub d_beta: f64,
    pub topology: TreeTopology,
    pub gates: Vec<GateParams>,
    pub experts: Vec<ExpertParams>,
}

impl ModelParams {
    pub fn new(
        task: TaskKind,
        d_beta: f64,
        topology: TreeTopology,
        gates: Vec<GateParams>,
        experts: Vec<ExpertParams>,
    ) -> Result<Self> {
        if gates.len() != topology.n_gates() || experts.len() != topology.n_experts() {
            return Err(Error::InvalidModel(format!(
                "topology needs {} gates and {} experts, got {} and {}",
                topology.n_gates(),
                topology.n_experts(),
                gates.len(),
                experts.len()
            )));
        }
        let dim = experts[0].weights.len();
        if dim == 0 {
            return Err(Error::InvalidModel("experts have no features".into()));
        }
        if let Some(j) = experts.iter().position(|e| e.weights.len() != dim) {
            return Err(Error::InvalidModel(format!("expert {j} has the wrong dimension")));
        }
        if let Some(i) = gates.iter().position(|g| g.gamma >= dim) {
            return Err(Error::InvalidModel(format!(
                "gate {i} splits on feature {} but the model has {dim}",
                gates[i].gamma
            )));
        }
        if task == TaskKind::Regression {
            if let Some(j) = experts.iter().position(|e| !(e.sigma2 > 0.0)) {
                return Err(Error::InvalidModel(format!("expert {j} has non-positive variance")));
            }
        }
        Ok(ModelParams {
            task,
            d_beta,
            topology,
            gates,
            experts,
        })
    }

    pub fn dim(&self) -> usize {
        self.experts[0].weights.len()
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn n_gates(&self) -> usize {
        self.gates.len()
    }

    /// Log-probability of the root-to-leaf path of expert `j`.
    pub fn path_log_prob(&self, x: &[f64], j: usize) -> f64 {
        self.topology
            .path(j)
            .iter()
            .map(|step| {
                let g = clamp_prob(self.gates[step.gate].g);
                let a = if x[self.gates[step.gate].gamma] < self.gates[step.gate].threshold {
                    g
                } else {
                    1.0 - g
                };
                if step.left {
                    a.ln()
                } else {
                    (1.0 - a).ln()
                }
            })
            .sum()
    }

    /// Log branch probabilities of every gate, indexed by
    /// `[below-left, below-right, above-left, above-right]`, where "below"
    /// means `x[gamma] < threshold`. Sums over a path agree bitwise with
    /// `path_log_prob`.
    pub fn log_branch_table(&self) -> Vec<[f64; 4]> {
        self.gates
            .iter()
            .map(|gate| {
                let g = clamp_prob(gate.g);
                let h = 1.0 - g;
                [g.ln(), (1.0 - g).ln(), h.ln(), (1.0 - h).ln()]
            })
            .collect()
    }

    /// `path_log_prob` with branch logs read from `log_branch_table`.
    #[inline]
    pub fn path_log_prob_with(&self, table: &[[f64; 4]], x: &[f64], j: usize) -> f64 {
        self.topology
            .path(j)
            .iter()
            .map(|step| {
                let gate = &self.gates[step.gate];
                let above = if x[gate.gamma] < gate.threshold { 0 } else { 2 };
                table[step.gate][above + usize::from(!step.left)]
            })
            .sum()
    }

    pub fn expert_log_likelihood(&self, y: f64, x: &[f64], j: usize) -> f64 {
        expert_log_likelihood(y, x, &self.experts[j], self.task)
    }

    /// Routes `x` to the active expert with the most probable path (lowest
    /// index on ties) and evaluates it.
    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        let mut best: Option<(usize, f64)> = None;
        for j in self.topology.active_experts() {
            let lp = self.path_log_prob(x, j);
            if best.is_none_or(|(_, b)| lp > b) {
                best = Some((j, lp));
            }
        }
        let (expert, _) = best.ok_or(Error::NoActiveExperts)?;
        let f = self.experts[expert].linear(x);
        let value = match self.task {
            TaskKind::Regression => f,
            TaskKind::Classification => sigmoid(f),
        };
        Ok(Prediction {
            expert,
            value,
            task: self.task,
        })
    }

    pub fn prune(&self, eliminated: &[usize]) -> Result<Self> {
        if let Some(&j) = eliminated.iter().find(|&&j| j < self.n_experts() && !self.topology.is_active(j)) {
            return Err(Error::contract(format!("expert {j} is already inactive")));
        }
        Ok(ModelParams {
            topology: self.topology.prune(eliminated)?,
            ..self.clone()
        })
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.experts.iter().map(ExpertParams::cardinality).collect()
    }
}
