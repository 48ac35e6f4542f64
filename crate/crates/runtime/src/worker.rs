//! Worker side of the protocol: owns one partition and answers coordinator
//! requests with fixed-size aggregates.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use dfab_core::experts::{
    expert_moments, foba_logistic, foba_regression, ls_fit_moments, weighted_logistic_fit, PenalizedObjective, WeightedMoments,
};
use dfab_core::gates::{build_split_grid, local_gate_stats_all, local_minmax};
use dfab_core::init::init_responsibilities;
use dfab_core::objective::{apply_shrink, local_estep, local_loglik, mass_stats};
use dfab_core::{Dataset, ModelParams, TaskKind, WorkerPartition};

use crate::codec::{decode_model, decode_stats, encode_gate_stats, encode_stats, expect_len, SetupInfo};
use crate::error::{Error, Result};
use crate::protocol::{pack_bytes, unpack_bytes, Frame, Shape, Tag};

/// Produces a worker's rows once it knows its index; used when workers read
/// the training data themselves.
pub type PartitionLoader = Box<dyn FnMut(&SetupInfo) -> Result<(Dataset, Vec<usize>)> + Send>;

enum Source {
    Ready(Dataset, Vec<usize>),
    Shipped(Option<(Vec<f64>, Vec<f64>, Vec<usize>, usize)>),
    Loader(PartitionLoader),
    Consumed,
}

pub const PENALTY_ESTEP: f64 = 0.0;
pub const PENALTY_EXPERTS: f64 = 1.0;

pub struct Worker {
    source: Source,
    setup: Option<SetupInfo>,
    part: Option<WorkerPartition>,
    model: Option<ModelParams>,
    moments: Vec<Option<WeightedMoments>>,
}

/// File holding one worker's responsibilities at a checkpoint.
pub fn q_file_name(index: usize, iteration: usize) -> String {
    format!("q-w{index}-t{iteration}.bin")
}

impl Worker {
    /// A worker handed its rows in memory.
    pub fn with_data(data: Dataset, ids: Vec<usize>) -> Self {
        Self::from_source(Source::Ready(data, ids))
    }

    /// A worker that receives its rows in a `PartitionData` frame.
    pub fn awaiting_data() -> Self {
        Self::from_source(Source::Shipped(None))
    }

    pub fn with_loader(loader: PartitionLoader) -> Self {
        Self::from_source(Source::Loader(loader))
    }

    fn from_source(source: Source) -> Self {
        Worker {
            source,
            setup: None,
            part: None,
            model: None,
            moments: Vec::new(),
        }
    }

    fn setup(&self) -> Result<&SetupInfo> {
        self.setup.as_ref().ok_or_else(|| Error::protocol("worker has not been set up"))
    }

    fn shape(&self) -> Result<Shape> {
        Ok(self.setup()?.shape())
    }

    fn part(&mut self) -> Result<&mut WorkerPartition> {
        self.part.as_mut().ok_or_else(|| Error::protocol("worker holds no partition"))
    }

    fn model(&self) -> Result<&ModelParams> {
        self.model.as_ref().ok_or_else(|| Error::protocol("worker has no model yet"))
    }

    /// Answers one request. `Terminate` gets no reply.
    pub fn handle(&mut self, frame: &Frame) -> Result<Vec<Frame>> {
        let it = frame.iteration;
        let p = &frame.payload[..];
        if let Some(len) = self.setup.as_ref().and_then(|s| s.shape().payload_len(frame.tag)) {
            expect_len(frame.tag.name(), p, len)?;
        }
        let reply = |tag, payload| Frame::new(tag, it, payload);
        match frame.tag {
            Tag::PartitionData => {
                self.receive_rows(p)?;
                Ok(vec![])
            }
            Tag::Setup => {
                let info = SetupInfo::decode(p)?;
                let part = self.build_partition(&info)?;
                let (mins, maxs) = local_minmax(&part)?;
                let mut out = mins;
                out.extend(maxs);
                out.push(part.targets().iter().sum());
                out.push(part.len() as f64);
                self.part = Some(part);
                self.setup = Some(info);
                Ok(vec![reply(Tag::MinMaxReport, out)])
            }
            Tag::BroadcastGrid => {
                let d = self.shape()?.dim;
                let grid = build_split_grid(&[(p[..d].to_vec(), p[d..2 * d].to_vec())], p[2 * d] as usize)?;
                let seed = self.setup()?.seed;
                let part = self.part()?;
                part.set_grid(grid)?;
                init_responsibilities(part, seed);
                Ok(vec![])
            }
            Tag::BroadcastModel => {
                let s = self.setup()?;
                let model = decode_model(p, &s.shape(), s.depth, s.task, s.d_beta)?;
                let part = self.part()?;
                let ll = local_loglik(part, &model)?;
                self.model = Some(model);
                let mut out = vec![ll.expected, ll.entropy];
                out.extend(encode_stats(&ll.stats));
                Ok(vec![reply(Tag::LoglikReport, out)])
            }
            Tag::BroadcastPenalty => {
                let stats = decode_stats(&p[2..], &self.shape()?)?;
                if p[0] == PENALTY_ESTEP {
                    let model = self.model()?.clone();
                    let local = local_estep(self.part()?, &model, (p[1] != 0.0).then_some(&stats))?;
                    Ok(vec![reply(Tag::EStatsReport, encode_stats(&local))])
                } else {
                    Ok(vec![reply(Tag::ExpertCandidateReport, self.candidates(&stats)?)])
                }
            }
            Tag::ShrinkDirective => {
                let eliminated: Vec<usize> = (0..p.len()).filter(|&j| p[j] != 0.0).collect();
                let mut model = self.model()?.clone();
                if !eliminated.is_empty() {
                    model = model.prune(&eliminated)?;
                }
                let part = self.part()?;
                apply_shrink(part, &eliminated, &model.topology)?;
                let stats = mass_stats(part, &model.topology);
                let gates = local_gate_stats_all(part, &model.topology)?;
                self.model = Some(model);
                Ok(vec![reply(Tag::EStatsReport, encode_stats(&stats)), reply(Tag::GateStatsReport, encode_gate_stats(&gates))])
            }
            Tag::BroadcastFeatureSet => Ok(vec![reply(Tag::ExpertFitReport, self.refits(p)?)]),
            Tag::CheckpointRequest => {
                let dir = PathBuf::from(String::from_utf8(unpack_bytes(&p[1..])?).map_err(|e| Error::protocol(e.to_string()))?);
                let digest = self.save_q(&dir, p[0] as usize)?;
                Ok(vec![reply(Tag::CheckpointAck, pack_bytes(&digest))])
            }
            Tag::Restore => {
                let dir = PathBuf::from(String::from_utf8(unpack_bytes(&p[1..])?).map_err(|e| Error::protocol(e.to_string()))?);
                let digest = self.load_q(&dir, p[0] as usize)?;
                Ok(vec![reply(Tag::CheckpointAck, pack_bytes(&digest))])
            }
            Tag::Terminate => Ok(vec![]),
            other => Err(Error::protocol(format!("worker cannot handle {other}"))),
        }
    }

    fn receive_rows(&mut self, p: &[f64]) -> Result<()> {
        let Source::Shipped(slot) = &mut self.source else {
            return Err(Error::protocol("worker did not expect shipped rows"));
        };
        if p.len() < 2 {
            return Err(Error::protocol("truncated partition data"));
        }
        let (n, dim) = (p[0] as usize, p[1] as usize);
        expect_len("PartitionData", p, 2 + n * (dim + 2))?;
        let ids = p[2..2 + n].iter().map(|&v| v as usize).collect();
        let x = p[2 + n..2 + n + n * dim].to_vec();
        let y = p[2 + n + n * dim..].to_vec();
        *slot = Some((x, y, ids, dim));
        Ok(())
    }

    fn build_partition(&mut self, info: &SetupInfo) -> Result<WorkerPartition> {
        let e = info.shape().experts;
        let source = std::mem::replace(&mut self.source, Source::Consumed);
        let (x, y, ids, dim) = match source {
            Source::Ready(d, ids) => (d.x, d.y, ids, d.dim),
            Source::Shipped(Some(rows)) => rows,
            Source::Shipped(None) => return Err(Error::protocol("setup arrived before the partition data")),
            Source::Loader(mut load) => {
                let (d, ids) = load(info)?;
                (d.x, d.y, ids, d.dim)
            }
            Source::Consumed => return Err(Error::protocol("worker was already set up")),
        };
        if dim != info.dim {
            return Err(Error::protocol(format!("worker rows have {dim} features, run has {}", info.dim)));
        }
        if let Some(bad) = y.iter().find(|&&v| !info.task.accepts_target(v)) {
            return Err(Error::protocol(format!("target {bad} is invalid for {}", info.task.as_str())));
        }
        Ok(WorkerPartition::new(x, y, dim, info.task, ids, e)?)
    }

    fn candidates(&mut self, stats: &dfab_core::EStats) -> Result<Vec<f64>> {
        let s = self.setup()?.clone();
        let shape = s.shape();
        let model = self.model()?.clone();
        let active: Vec<usize> = model.topology.active_experts().collect();
        let part = self.part.as_ref().ok_or_else(|| Error::protocol("worker holds no partition"))?;
        let mut out = vec![0.0; shape.experts * (1 + shape.dim)];
        self.moments = vec![None; shape.experts];
        if s.task == TaskKind::Regression {
            for (m, &j) in expert_moments(part, &active).into_iter().zip(&active) {
                self.moments[j] = m;
            }
        }
        for &j in &active {
            let penalty = PenalizedObjective { workers: s.workers, nphi_scaled: stats.nphi_scaled[j] };
            let found = match s.task {
                TaskKind::Regression => self.moments[j].as_ref().map(|m| foba_regression(m, &penalty, &s.foba)).transpose()?,
                TaskKind::Classification => {
                    let q = part.q_column(j);
                    foba_logistic(part.features(), part.targets(), part.dim(), &q, &penalty, &s.foba)?
                }
            };
            if let Some(r) = found {
                let row = &mut out[j * (1 + shape.dim)..(j + 1) * (1 + shape.dim)];
                row[0] = 1.0;
                for d in r.support {
                    row[1 + d] = 1.0;
                }
            }
        }
        Ok(out)
    }

    fn refits(&mut self, p: &[f64]) -> Result<Vec<f64>> {
        let s = self.setup()?.clone();
        let shape = s.shape();
        let model = self.model()?.clone();
        let part = self.part.as_ref().ok_or_else(|| Error::protocol("worker holds no partition"))?;
        let width = 3 + shape.dim;
        let mut out = vec![0.0; shape.experts * width];
        for j in model.topology.active_experts() {
            let features: Vec<usize> = (0..shape.dim).filter(|&d| p[j * shape.dim + d] != 0.0).collect();
            let fit = match s.task {
                TaskKind::Regression => match self.moments.get(j).and_then(Option::as_ref) {
                    Some(m) => Some(ls_fit_moments(m, &features)?.params),
                    None => None,
                },
                TaskKind::Classification => {
                    let q = part.q_column(j);
                    weighted_logistic_fit(part.features(), part.targets(), part.dim(), &q, &features)?.map(|f| f.params)
                }
            };
            if let Some(params) = fit {
                let row = &mut out[j * width..(j + 1) * width];
                row[0] = 1.0;
                row[1] = params.intercept;
                row[2] = params.sigma2;
                row[3..].copy_from_slice(&params.weights);
            }
        }
        Ok(out)
    }

    fn q_bytes(&mut self) -> Result<Vec<u8>> {
        let part = self.part()?;
        let mut bytes = Vec::with_capacity(16 + 8 * part.q.len());
        bytes.extend_from_slice(&(part.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&(part.n_experts() as u64).to_le_bytes());
        for v in &part.q {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Ok(bytes)
    }

    fn save_q(&mut self, dir: &Path, iteration: usize) -> Result<Vec<u8>> {
        let index = self.setup()?.index;
        let bytes = self.q_bytes()?;
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(q_file_name(index, iteration)), &bytes)?;
        Ok(Sha256::digest(&bytes).to_vec())
    }

    fn load_q(&mut self, dir: &Path, iteration: usize) -> Result<Vec<u8>> {
        let index = self.setup()?.index;
        let path = dir.join(q_file_name(index, iteration));
        let bytes = std::fs::read(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let part = self.part()?;
        let expected = 16 + 8 * part.len() * part.n_experts();
        if bytes.len() != expected
            || u64::from_le_bytes(bytes[0..8].try_into().unwrap()) != part.len() as u64
            || u64::from_le_bytes(bytes[8..16].try_into().unwrap()) != part.n_experts() as u64
        {
            return Err(Error::Checkpoint(format!("{} does not match this worker's partition", path.display())));
        }
        for (q, c) in part.q.iter_mut().zip(bytes[16..].chunks_exact(8)) {
            *q = f64::from_le_bytes(c.try_into().unwrap());
        }
        Ok(Sha256::digest(&bytes).to_vec())
    }
}

/// Encodes a shipped partition: `[n, dim, ids, x, y]`.
pub fn partition_payload(data: &Dataset, ids: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 + ids.len() * (data.dim + 2));
    out.push(data.len() as f64);
    out.push(data.dim as f64);
    out.extend(ids.iter().map(|&i| i as f64));
    out.extend_from_slice(&data.x);
    out.extend_from_slice(&data.y);
    out
}

/// Runs a worker over a byte stream until `Terminate` or a failure; failures
/// are reported to the peer before returning.
pub fn serve(worker: &mut Worker, reader: &mut impl Read, writer: &mut impl Write) -> Result<()> {
    loop {
        let (frame, _) = Frame::read_from(reader)?;
        if frame.tag == Tag::Terminate {
            return Ok(());
        }
        match worker.handle(&frame) {
            Ok(replies) => {
                for r in replies {
                    r.write_to(writer)?;
                }
                writer.flush()?;
            }
            Err(e) => {
                let _ = Frame::new(Tag::Failure, frame.iteration, pack_bytes(e.to_string().as_bytes())).write_to(writer);
                let _ = writer.flush();
                return Err(e);
            }
        }
    }
}
