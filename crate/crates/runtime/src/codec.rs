//! Payload layouts of the structured messages.

use dfab_core::experts::FobaLimits;
use dfab_core::gates::GateStats;
use dfab_core::{EStats, ExpertParams, GateParams, ModelParams, TaskKind, TreeTopology};

use crate::error::{Error, Result};
use crate::protocol::{pack_u64, unpack_u64, Shape};

/// Everything a worker needs to know about the run before it sees data.
#[derive(Debug, Clone, PartialEq)]
pub struct SetupInfo {
    pub index: usize,
    pub workers: usize,
    pub depth: u32,
    pub dim: usize,
    pub task: TaskKind,
    pub tmax: usize,
    pub d_beta: f64,
    /// Seeds the initial responsibilities.
    pub seed: u64,
    /// Seeds the sample shuffle that defines the partitions.
    pub partition_seed: u64,
    pub foba: FobaLimits,
}

impl SetupInfo {
    pub const LEN: usize = 13;

    pub fn shape(&self) -> Shape {
        let experts = 1usize << self.depth;
        Shape { experts, gates: experts - 1, dim: self.dim, tmax: self.tmax }
    }

    pub fn encode(&self) -> Vec<f64> {
        let [sh, sl] = pack_u64(self.seed);
        let [ph, pl] = pack_u64(self.partition_seed);
        vec![
            self.index as f64,
            self.workers as f64,
            self.depth as f64,
            self.dim as f64,
            task_code(self.task),
            self.tmax as f64,
            self.d_beta,
            sh,
            sl,
            ph,
            pl,
            self.foba.max_steps as f64,
            self.foba.max_features.map_or(-1.0, |m| m as f64),
        ]
    }

    pub fn decode(p: &[f64]) -> Result<Self> {
        expect_len("Setup", p, Self::LEN)?;
        let depth = p[2] as u32;
        if depth == 0 || depth > 16 {
            return Err(Error::protocol(format!("setup depth {depth} out of range")));
        }
        Ok(SetupInfo {
            index: p[0] as usize,
            workers: p[1] as usize,
            depth,
            dim: p[3] as usize,
            task: task_from_code(p[4])?,
            tmax: p[5] as usize,
            d_beta: p[6],
            seed: unpack_u64(p[7], p[8]),
            partition_seed: unpack_u64(p[9], p[10]),
            foba: FobaLimits {
                max_steps: p[11] as usize,
                max_features: (p[12] >= 0.0).then_some(p[12] as usize),
            },
        })
    }
}

pub fn task_code(task: TaskKind) -> f64 {
    match task {
        TaskKind::Regression => 0.0,
        TaskKind::Classification => 1.0,
    }
}

pub fn task_from_code(v: f64) -> Result<TaskKind> {
    match v as i64 {
        0 => Ok(TaskKind::Regression),
        1 => Ok(TaskKind::Classification),
        _ => Err(Error::protocol(format!("unknown task code {v}"))),
    }
}

pub fn expect_len(what: &str, p: &[f64], len: usize) -> Result<()> {
    if p.len() != len {
        return Err(Error::protocol(format!("{what} payload has {} values, expected {len}", p.len())));
    }
    Ok(())
}

/// `[active mask | (gamma, t, g) per gate | (weights, intercept, sigma2) per expert]`.
pub fn encode_model(m: &ModelParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.n_experts() + 3 * m.n_gates() + m.n_experts() * (m.dim() + 2));
    out.extend(m.topology.active_mask().iter().map(|&a| a as u8 as f64));
    for g in &m.gates {
        out.extend([g.gamma as f64, g.threshold, g.g]);
    }
    for e in &m.experts {
        out.extend_from_slice(&e.weights);
        out.extend([e.intercept, e.sigma2]);
    }
    out
}

pub fn decode_model(p: &[f64], shape: &Shape, depth: u32, task: TaskKind, d_beta: f64) -> Result<ModelParams> {
    expect_len("BroadcastModel", p, shape.model_len())?;
    let (e, g, d) = (shape.experts, shape.gates, shape.dim);
    let active: Vec<bool> = p[..e].iter().map(|&v| v != 0.0).collect();
    let topology = TreeTopology::from_masks(depth, active, None)?;
    let gates = p[e..e + 3 * g]
        .chunks_exact(3)
        .map(|c| GateParams { gamma: c[0] as usize, threshold: c[1], g: c[2] })
        .collect();
    let experts = p[e + 3 * g..]
        .chunks_exact(d + 2)
        .map(|c| ExpertParams { weights: c[..d].to_vec(), intercept: c[d], sigma2: c[d + 1] })
        .collect();
    Ok(ModelParams::new(task, d_beta, topology, gates, experts)?)
}

pub fn encode_stats(s: &EStats) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * s.n_experts() + s.n_gates());
    out.extend_from_slice(&s.nphi);
    out.extend_from_slice(&s.nbeta);
    out.extend_from_slice(&s.nphi_scaled);
    out
}

pub fn decode_stats(p: &[f64], shape: &Shape) -> Result<EStats> {
    expect_len("statistics", p, shape.stats_len())?;
    let (e, g) = (shape.experts, shape.gates);
    Ok(EStats {
        nphi: p[..e].to_vec(),
        nbeta: p[e..e + g].to_vec(),
        nphi_scaled: p[e + g..].to_vec(),
    })
}

/// `[left | right]` per gate, each `dim x (tmax - 1)`.
pub fn encode_gate_stats(all: &[GateStats]) -> Vec<f64> {
    let mut out = Vec::new();
    for s in all {
        out.extend_from_slice(&s.left);
        out.extend_from_slice(&s.right);
    }
    out
}

pub fn decode_gate_stats(p: &[f64], shape: &Shape) -> Result<Vec<GateStats>> {
    expect_len("GateStatsReport", p, shape.gate_stats_len())?;
    let block = shape.dim * (shape.tmax - 1);
    Ok(p.chunks_exact(2 * block)
        .map(|c| GateStats { slots: shape.tmax - 1, left: c[..block].to_vec(), right: c[block..].to_vec() })
        .collect())
}
