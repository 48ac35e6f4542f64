//! Coordinator loop. Every step is a broadcast followed by a gather from all
//! workers, so each step is a barrier and only fixed-size aggregates cross
//! the wire.

use std::path::PathBuf;
use std::time::Instant;

use dfab_core::experts::{average_weights, majority_vote};
use dfab_core::gates::{build_split_grid, select_gate, GateStats};
use dfab_core::init::init_model;
use dfab_core::objective::{decide_shrink, estep_aggregate, fic_aggregate};
use dfab_core::{Dataset, EStats, ExpertParams, FicReport, ModelParams, SplitGrid, TrainConfig};

use crate::checkpoint::{Checkpoint, GridRecord, ShardRecord};
use crate::codec::{decode_gate_stats, decode_stats, encode_model, encode_stats, SetupInfo};
use crate::error::{Error, Result};
use crate::protocol::{pack_bytes, unpack_bytes, Frame, Shape, Tag};
use crate::report::{IterationRecord, TrainReport, Traffic};
use crate::transport::Transport;
use crate::worker::{partition_payload, q_file_name, PENALTY_ESTEP, PENALTY_EXPERTS};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointPolicy {
    pub dir: PathBuf,
    /// Checkpoint after every iteration divisible by this.
    pub every: usize,
}

/// What the coordinator needs besides the transport.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub config: TrainConfig,
    pub dim: usize,
    pub partition_seed: u64,
    pub checkpoints: Option<CheckpointPolicy>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub grid: SplitGrid,
    pub report: TrainReport,
}

/// Drives a full run over `transport`. `shipped` holds one partition per
/// worker when rows are sent over the wire; `resume` restarts after a
/// checkpoint. The transport is shut down on every exit path.
pub fn coordinate(
    transport: &mut dyn Transport,
    job: &Job,
    shipped: Option<&[(Dataset, Vec<usize>)]>,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    let result = Session::new(transport, job).and_then(|mut s| s.run(shipped, resume));
    let closed = transport.shutdown();
    let outcome = result?;
    closed?;
    Ok(outcome)
}

struct Session<'a> {
    transport: &'a mut dyn Transport,
    job: &'a Job,
    shape: Shape,
    workers: usize,
}

impl<'a> Session<'a> {
    fn new(transport: &'a mut dyn Transport, job: &'a Job) -> Result<Self> {
        job.config.validate()?;
        let workers = transport.workers();
        if workers == 0 {
            return Err(Error::Config("at least one worker is required".into()));
        }
        if job.dim == 0 {
            return Err(Error::Config("the data has no features".into()));
        }
        if job.partition_seed > i64::MAX as u64 {
            return Err(Error::Config(format!("partition seed exceeds {}", i64::MAX)));
        }
        if let Some(p) = &job.checkpoints {
            if p.every == 0 {
                return Err(Error::Config("checkpoint interval must be positive".into()));
            }
        }
        let experts = 1usize << job.config.depth;
        let shape = Shape { experts, gates: experts - 1, dim: job.dim, tmax: job.config.tmax };
        Ok(Session { transport, job, shape, workers })
    }

    fn broadcast(&mut self, traffic: &mut Traffic, frame: &Frame) -> Result<()> {
        for w in 0..self.workers {
            let n = self.transport.send(w, frame)?;
            traffic.record_sent(frame.tag, n);
        }
        Ok(())
    }

    /// One reply of `tag` from every worker, in worker order.
    fn gather(&mut self, traffic: &mut Traffic, tag: Tag, iteration: u32) -> Result<Vec<Vec<f64>>> {
        (0..self.workers).map(|w| self.receive(traffic, w, tag, iteration)).collect()
    }

    fn receive(&mut self, traffic: &mut Traffic, w: usize, tag: Tag, iteration: u32) -> Result<Vec<f64>> {
        let (frame, n) = self.transport.recv(w)?;
        traffic.record_received(frame.tag, n);
        if frame.tag != tag || frame.iteration != iteration {
            return Err(Error::protocol(format!(
                "worker {w} sent {} for iteration {}, expected {tag} for iteration {iteration}",
                frame.tag, frame.iteration
            )));
        }
        if let Some(len) = self.shape.payload_len(tag) {
            if frame.payload.len() != len {
                return Err(Error::protocol(format!("worker {w} sent {} values in {tag}, expected {len}", frame.payload.len())));
            }
        }
        Ok(frame.payload)
    }

    fn setup_info(&self, index: usize) -> SetupInfo {
        let c = &self.job.config;
        SetupInfo {
            index,
            workers: self.workers,
            depth: c.depth,
            dim: self.job.dim,
            task: c.task,
            tmax: c.tmax,
            d_beta: c.d_beta,
            seed: c.seed,
            partition_seed: self.job.partition_seed,
            foba: c.foba,
        }
    }

    fn run(&mut self, shipped: Option<&[(Dataset, Vec<usize>)]>, resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
        let cfg = self.job.config.clone();
        let mut report = TrainReport { workers: self.workers, ..Default::default() };
        let mut setup = Traffic::default();

        if let Some(parts) = shipped {
            if parts.len() != self.workers {
                return Err(Error::Config(format!("{} partitions for {} workers", parts.len(), self.workers)));
            }
            for (w, (data, ids)) in parts.iter().enumerate() {
                let frame = Frame::new(Tag::PartitionData, 0, partition_payload(data, ids));
                let n = self.transport.send(w, &frame)?;
                setup.record_sent(Tag::PartitionData, n);
            }
        }
        for w in 0..self.workers {
            let frame = Frame::new(Tag::Setup, 0, self.setup_info(w).encode());
            let n = self.transport.send(w, &frame)?;
            setup.record_sent(Tag::Setup, n);
        }
        let d = self.job.dim;
        let mut ranges = Vec::with_capacity(self.workers);
        let (mut target_sum, mut count) = (0.0, 0.0);
        for p in self.gather(&mut setup, Tag::MinMaxReport, 0)? {
            ranges.push((p[..d].to_vec(), p[d..2 * d].to_vec()));
            target_sum += p[2 * d];
            count += p[2 * d + 1];
        }
        let grid = match resume {
            Some(c) => {
                check_resume(c, self, count as usize)?;
                c.grid.rebuild()?
            }
            None => build_split_grid(&ranges, cfg.tmax)?,
        };
        let mut payload = grid.mins.clone();
        payload.extend_from_slice(&grid.maxs);
        payload.push(grid.tmax as f64);
        self.broadcast(&mut setup, &Frame::new(Tag::BroadcastGrid, 0, payload))?;

        let mut model;
        let start;
        let mut last_checkpoint = None;
        match resume {
            Some(c) => {
                model = c.model.clone();
                start = c.iteration;
                report.iterations = c.records.clone();
                report.resumed_from = Some(c.iteration);
                let frame = Frame::new(Tag::Restore, c.iteration as u32, restore_payload(c.iteration, &c.dir));
                self.broadcast(&mut setup, &frame)?;
                for (w, p) in self.gather(&mut setup, Tag::CheckpointAck, c.iteration as u32)?.iter().enumerate() {
                    let digest = hex::encode(unpack_bytes(p)?);
                    if digest != c.shards[w].sha256 {
                        return Err(Error::Checkpoint(format!("worker {w} restored responsibilities with digest {digest}, expected {}", c.shards[w].sha256)));
                    }
                }
                last_checkpoint = Some(c.dir.join(crate::checkpoint::checkpoint_file_name(c.iteration)));
            }
            None => {
                model = init_model(&cfg, &grid, target_sum, count)?;
                start = 0;
            }
        }
        report.setup = setup;

        let mut t = start + 1;
        while t <= cfg.max_iters {
            let began = Instant::now();
            let mut traffic = Traffic::default();
            let step = self.iteration(t, &mut model, &grid, &mut traffic, &report);
            let (fic, converged) = match step {
                Ok(v) => v,
                Err(e) => {
                    return Err(Error::Aborted { iteration: t, checkpoint: last_checkpoint, source: Box::new(e) });
                }
            };
            report.iterations.push(IterationRecord {
                iteration: t,
                fic: fic.fic,
                loglik: fic.loglik,
                gate_penalty: fic.gate_penalty,
                expert_penalty: fic.expert_penalty,
                active_experts: model.topology.active_count(),
                cardinalities: model.cardinalities(),
                converged,
                traffic,
                millis: began.elapsed().as_millis() as u64,
            });
            if converged {
                report.converged = true;
                report.final_fic = Some(fic.fic);
                break;
            }
            if let Some(policy) = self.job.checkpoints.clone() {
                if t % policy.every == 0 {
                    let began = Instant::now();
                    let mut traffic = Traffic::default();
                    let saved = self.checkpoint(t, &policy, &model, &grid, count as usize, &report, &mut traffic);
                    let path = saved.map_err(|e| Error::Aborted { iteration: t, checkpoint: last_checkpoint.clone(), source: Box::new(e) })?;
                    log::info!("checkpoint written to {}", path.display());
                    let record = report.iterations.last_mut().expect("record pushed above");
                    for (tag, n) in traffic.by_tag {
                        *record.traffic.by_tag.entry(tag).or_default() += n;
                    }
                    record.traffic.sent += traffic.sent;
                    record.traffic.received += traffic.received;
                    record.millis += began.elapsed().as_millis() as u64;
                    report.checkpoints.push(path.clone());
                    last_checkpoint = Some(path);
                }
            }
            t += 1;
        }
        if !report.converged && cfg.max_iters > 0 {
            let it = (cfg.max_iters + 1) as u32;
            let mut traffic = Traffic::default();
            let fic = self
                .fic_pass(it, &model, &mut traffic)
                .map_err(|e| Error::Aborted { iteration: cfg.max_iters + 1, checkpoint: last_checkpoint, source: Box::new(e) })?;
            report.final_fic = Some(fic.0.fic);
        }
        Ok(TrainOutcome { model, grid, report })
    }

    /// Refreshes every worker's caches under `model` and composes the
    /// objective. Returns it with the aggregated masses.
    fn fic_pass(&mut self, it: u32, model: &ModelParams, traffic: &mut Traffic) -> Result<(FicReport, EStats)> {
        self.broadcast(traffic, &Frame::new(Tag::BroadcastModel, it, encode_model(model)))?;
        let mut ll = Vec::with_capacity(self.workers);
        let mut stats = Vec::with_capacity(self.workers);
        for p in self.gather(traffic, Tag::LoglikReport, it)? {
            ll.push(p[0] + p[1]);
            stats.push(decode_stats(&p[2..], &self.shape)?);
        }
        let stats = estep_aggregate(&stats)?;
        Ok((fic_aggregate(&ll, &stats, model)?, stats))
    }

    fn penalty_frame(it: u32, phase: f64, apply: bool, stats: &EStats) -> Frame {
        let mut payload = vec![phase, apply as u8 as f64];
        payload.extend(encode_stats(stats));
        Frame::new(Tag::BroadcastPenalty, it, payload)
    }

    fn gather_stats(&mut self, traffic: &mut Traffic, it: u32) -> Result<EStats> {
        let locals = self
            .gather(traffic, Tag::EStatsReport, it)?
            .iter()
            .map(|p| decode_stats(p, &self.shape))
            .collect::<Result<Vec<_>>>()?;
        Ok(estep_aggregate(&locals)?)
    }

    /// One full iteration. Returns the objective of the incoming model and
    /// whether training has converged (in which case nothing is updated).
    fn iteration(
        &mut self,
        t: usize,
        model: &mut ModelParams,
        grid: &SplitGrid,
        traffic: &mut Traffic,
        report: &TrainReport,
    ) -> Result<(FicReport, bool)> {
        let cfg = &self.job.config;
        let it = t as u32;
        let (fic, fic_stats) = self.fic_pass(it, model, traffic)?;
        if let Some(prev) = report.iterations.last() {
            if (fic.fic - prev.fic).abs() < cfg.delta_term * prev.fic.abs() {
                return Ok((fic, true));
            }
        }

        self.broadcast(traffic, &Self::penalty_frame(it, PENALTY_ESTEP, t > 1, &fic_stats))?;
        let after_e = self.gather_stats(traffic, it)?;

        let eliminated = decide_shrink(&after_e, cfg.eps_shrink, &model.topology);
        if !eliminated.is_empty() {
            log::info!("iteration {t}: eliminating experts {eliminated:?}");
            *model = model.prune(&eliminated)?;
        }
        let mut mask = vec![0.0; self.shape.experts];
        for &j in &eliminated {
            mask[j] = 1.0;
        }
        self.broadcast(traffic, &Frame::new(Tag::ShrinkDirective, it, mask))?;
        let mut locals = Vec::with_capacity(self.workers);
        let mut gate_stats: Vec<Vec<GateStats>> = Vec::with_capacity(self.workers);
        for w in 0..self.workers {
            let p = self.receive(traffic, w, Tag::EStatsReport, it)?;
            locals.push(decode_stats(&p, &self.shape)?);
            let p = self.receive(traffic, w, Tag::GateStatsReport, it)?;
            gate_stats.push(decode_gate_stats(&p, &self.shape)?);
        }
        let post = estep_aggregate(&locals)?;

        let live: Vec<usize> = model.topology.live_gates().collect();
        for i in live {
            if post.nbeta[i] > 0.0 {
                if let Some(g) = select_gate(gate_stats.iter().map(|s| &s[i]), post.nbeta[i], grid, cfg.split_score) {
                    model.gates[i] = g;
                }
            }
        }

        self.broadcast(traffic, &Self::penalty_frame(it, PENALTY_EXPERTS, true, &post))?;
        let candidates = self.gather(traffic, Tag::ExpertCandidateReport, it)?;
        let (e, d) = (self.shape.experts, self.shape.dim);
        let mut features = vec![0.0; e * d];
        for j in model.topology.active_experts() {
            let supports: Vec<Vec<bool>> = candidates
                .iter()
                .map(|p| &p[j * (1 + d)..(j + 1) * (1 + d)])
                .filter(|row| row[0] != 0.0)
                .map(|row| row[1..].iter().map(|&v| v != 0.0).collect())
                .collect();
            for f in majority_vote(supports.iter().map(Vec::as_slice), d, self.workers) {
                features[j * d + f] = 1.0;
            }
        }
        self.broadcast(traffic, &Frame::new(Tag::BroadcastFeatureSet, it, features))?;
        let fits = self.gather(traffic, Tag::ExpertFitReport, it)?;
        let active: Vec<usize> = model.topology.active_experts().collect();
        for j in active {
            let params: Vec<Option<ExpertParams>> = fits
                .iter()
                .map(|p| {
                    let row = &p[j * (3 + d)..(j + 1) * (3 + d)];
                    (row[0] != 0.0).then(|| ExpertParams { weights: row[3..].to_vec(), intercept: row[1], sigma2: row[2] })
                })
                .collect();
            model.experts[j] = average_weights(params.iter().map(Option::as_ref), &model.experts[j]);
        }
        Ok((fic, false))
    }

    #[allow(clippy::too_many_arguments)]
    fn checkpoint(
        &mut self,
        t: usize,
        policy: &CheckpointPolicy,
        model: &ModelParams,
        grid: &SplitGrid,
        samples: usize,
        report: &TrainReport,
        traffic: &mut Traffic,
    ) -> Result<PathBuf> {
        std::fs::create_dir_all(&policy.dir)?;
        let it = t as u32;
        self.broadcast(traffic, &Frame::new(Tag::CheckpointRequest, it, restore_payload(t, &policy.dir)))?;
        let shards = self
            .gather(traffic, Tag::CheckpointAck, it)?
            .iter()
            .enumerate()
            .map(|(w, p)| Ok(ShardRecord { worker: w, file: q_file_name(w, t), sha256: hex::encode(unpack_bytes(p)?) }))
            .collect::<Result<Vec<_>>>()?;
        let c = Checkpoint {
            iteration: t,
            workers: self.workers,
            samples,
            partition_seed: self.job.partition_seed,
            config: self.job.config.clone(),
            grid: GridRecord::of(grid),
            model: model.clone(),
            records: report.iterations.clone(),
            shards,
            dir: policy.dir.clone(),
        };
        c.save()
    }
}

fn restore_payload(iteration: usize, dir: &std::path::Path) -> Vec<f64> {
    let mut p = vec![iteration as f64];
    p.extend(pack_bytes(dir.to_string_lossy().as_bytes()));
    p
}

fn check_resume(c: &Checkpoint, s: &Session<'_>, samples: usize) -> Result<()> {
    let mismatch = |what: &str| Err(Error::Checkpoint(format!("checkpoint {what} does not match this run")));
    if c.workers != s.workers {
        return mismatch("worker count");
    }
    if c.partition_seed != s.job.partition_seed {
        return mismatch("partition seed");
    }
    if c.samples != samples {
        return mismatch("sample count");
    }
    if c.grid.mins.len() != s.job.dim || c.model.dim() != s.job.dim {
        return mismatch("dimension");
    }
    let (a, b) = (&c.config, &s.job.config);
    if a.depth != b.depth || a.tmax != b.tmax || a.task != b.task || a.seed != b.seed {
        return mismatch("configuration");
    }
    Ok(())
}
