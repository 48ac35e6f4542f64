use std::io::Write as _;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, Context};
use dfab_core::data::{read_csv, synth_generate, write_csv};
use dfab_core::eval::{evaluate, predict_rows};
use dfab_core::{deserialize_model, serialize_model, ModelDocument, SyntheticSpec, TaskKind, TrainConfig};
use dfab_runtime::{
    coordinate, partition_dataset, run_restarts, serve_tcp, Checkpoint, CheckpointPolicy, ClusterConfig, DataMode, Job, SocketTransport,
    TrainOutcome, TransportKind, Worker,
};
use serde::Serialize;

use crate::args::{EvaluateArgs, InspectArgs, PredictArgs, SynthArgs, TrainArgs, TransportArg, WorkerArgs};
use crate::failure::{from_runtime, CmdResult, Failure, OrFailure};
use crate::inspect::render;
use crate::manifest::{ClusterRecord, InputRecord, OutputRecord, RestartRecord, ResultRecord, RunManifest, SplitRecord};
use crate::prepare::{content_hash, load, prepare, resolve};

pub const MODEL_FILE: &str = "model.toml";
pub const REPORT_FILE: &str = "report.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_model(path: &Path) -> CmdResult<ModelDocument> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).usage()?;
    deserialize_model(&text).with_context(|| format!("parsing {}", path.display())).usage()
}

pub fn synth(a: &SynthArgs) -> CmdResult {
    let spec = SyntheticSpec {
        depth: a.depth,
        experts: a.experts,
        dim: a.d,
        n: a.n,
        nonzero: (a.nonzero_min, a.nonzero_max),
        noise: a.noise,
        noise_is_std: a.noise_std,
        seed: a.seed,
    };
    spec.validate().usage()?;
    let (data, truth) = synth_generate(&spec).usage()?;
    let prefix = resolve(&a.out);
    let (csv, model) = (with_suffix(&prefix, ".csv"), with_suffix(&prefix, ".truth.toml"));
    write_csv(&csv, &data, &a.target).abort()?;
    write_file(&model, &serialize_model(&ModelDocument::bare(truth)).abort()?).abort()?;
    println!("wrote {} and {}", csv.display(), model.display());
    Ok(())
}

const REPORT_COLUMNS: [&str; 9] =
    ["iteration", "fic", "loglik", "gate_penalty", "expert_penalty", "active_experts", "bytes", "millis", "converged"];

#[derive(Serialize)]
struct ReportRow {
    iteration: usize,
    fic: f64,
    loglik: f64,
    gate_penalty: f64,
    expert_penalty: f64,
    active_experts: usize,
    bytes: u64,
    millis: u64,
    converged: bool,
}

fn write_report(path: &Path, outcome: &TrainOutcome) -> anyhow::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .with_context(|| format!("writing {}", path.display()))?;
    // Written by hand so that a run without iterations still has a header.
    w.write_record(REPORT_COLUMNS)?;
    for r in &outcome.report.iterations {
        w.serialize(ReportRow {
            iteration: r.iteration,
            fic: r.fic,
            loglik: r.loglik,
            gate_penalty: r.gate_penalty,
            expert_penalty: r.expert_penalty,
            active_experts: r.active_experts,
            bytes: r.traffic.total(),
            millis: r.millis,
            converged: r.converged,
        })?;
    }
    w.flush()?;
    Ok(())
}

fn transport_name(t: TransportArg) -> &'static str {
    match t {
        TransportArg::Direct => "direct",
        TransportArg::Threads => "threads",
        TransportArg::Socket => "socket",
    }
}

fn socket_run(a: &TrainArgs, train: &dfab_core::Dataset, job: &Job, resume: Option<&Checkpoint>) -> CmdResult<TrainOutcome> {
    let addr = format!("{}:{}", a.bind, a.port);
    let listener = TcpListener::bind(&addr).with_context(|| format!("binding {addr}")).usage()?;
    eprintln!("waiting for {} workers on {addr}", a.workers);
    let mut transport =
        SocketTransport::accept(&listener, a.workers, Duration::from_secs(a.connect_timeout)).map_err(from_runtime)?;
    let parts = if a.self_load { None } else { Some(partition_dataset(train, a.workers, job.partition_seed).usage()?) };
    coordinate(&mut transport, job, parts.as_deref(), resume).map_err(from_runtime)
}

pub fn train(a: &TrainArgs) -> CmdResult {
    if a.workers == 0 {
        return Err(Failure::Usage(anyhow!("--workers must be at least 1")));
    }
    if a.restarts == 0 {
        return Err(Failure::Usage(anyhow!("--restarts must be at least 1")));
    }
    if a.restarts > 1 && (a.resume.is_some() || a.transport == TransportArg::Socket) {
        return Err(Failure::Usage(anyhow!("--restarts needs a fresh run with an in-process transport")));
    }
    if a.seed.checked_add(a.restarts - 1).is_none_or(|s| s > i64::MAX as u64) {
        return Err(Failure::Usage(anyhow!("--seed plus --restarts exceeds {}", i64::MAX)));
    }
    if a.self_load && a.transport != TransportArg::Socket {
        return Err(Failure::Usage(anyhow!("--self-load needs --transport socket")));
    }
    let input = resolve(&a.data.data);
    let task = TaskKind::from(a.data.task);
    let raw = load(&input, &a.data.target, task).usage()?;
    let split_seed = a.data.split_seed.unwrap_or(a.seed);
    let prepared = prepare(&raw, a.data.holdout, split_seed).usage()?;
    let n_train = prepared.train.len();

    let checkpoint = match &a.resume {
        Some(p) => Some(Checkpoint::load(p).map_err(from_runtime)?),
        None => None,
    };
    let mut config = match &checkpoint {
        Some(c) => TrainConfig { max_iters: a.max_iters, ..c.config.clone() },
        None => TrainConfig {
            task,
            depth: a.depth,
            tmax: a.tmax,
            eps_shrink: a.eps_shrink.unwrap_or(0.01 * n_train as f64),
            delta_term: a.delta_term,
            max_iters: a.max_iters,
            seed: a.seed,
            ..TrainConfig::default()
        },
    };
    config.validate().usage()?;
    if config.task != task {
        return Err(Failure::Usage(anyhow!("the checkpoint was trained for {}", config.task.as_str())));
    }
    let partition_seed = match &checkpoint {
        Some(c) => c.partition_seed,
        None => a.partition_seed.unwrap_or(a.seed),
    };
    let checkpoint_dir = (a.checkpoint_every > 0).then(|| a.checkpoint_dir.clone().unwrap_or_else(|| a.out_dir.join("checkpoints")));
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display())).usage()?;
    if let Some(dir) = &checkpoint_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).usage()?;
    }

    let data_mode = if a.self_load {
        "self-load"
    } else if a.ship || a.transport == TransportArg::Socket {
        "ship"
    } else {
        "in-memory"
    };
    let mut restarts = Vec::new();
    let outcome = match a.transport {
        TransportArg::Socket => {
            let job = Job {
                config: config.clone(),
                dim: prepared.train.dim,
                partition_seed,
                checkpoints: checkpoint_dir.clone().map(|dir| CheckpointPolicy { dir, every: a.checkpoint_every }),
            };
            socket_run(a, &prepared.train, &job, checkpoint.as_ref())?
        }
        local => {
            let cluster = ClusterConfig {
                workers: a.workers,
                transport: if local == TransportArg::Direct { TransportKind::Direct } else { TransportKind::Threads },
                data: if a.ship { DataMode::Ship } else { DataMode::InMemory },
                partition_seed,
                checkpoint_dir: checkpoint_dir.clone(),
                checkpoint_every: a.checkpoint_every.max(1),
            };
            match &checkpoint {
                Some(c) => dfab_runtime::resume(&prepared.train, c, &cluster, Some(a.max_iters)).map_err(from_runtime)?,
                None if a.restarts > 1 => {
                    let seeds: Vec<u64> = (a.seed..a.seed + a.restarts).collect();
                    let r = run_restarts(&prepared.train, &config, &cluster, &seeds).map_err(from_runtime)?;
                    restarts = seeds
                        .iter()
                        .zip(&r.runs)
                        .map(|(&seed, o)| RestartRecord {
                            seed,
                            iterations: o.report.iterations.len(),
                            converged: o.report.converged,
                            final_fic: o.report.final_fic,
                        })
                        .collect();
                    config.seed = seeds[r.best];
                    eprintln!("kept restart seed {}", config.seed);
                    r.into_best()
                }
                None => dfab_runtime::run_training(&prepared.train, &config, &cluster).map_err(from_runtime)?,
            }
        }
    };

    let doc = ModelDocument {
        model: outcome.model.clone(),
        fic: outcome.report.final_fic,
        standardization: Some(prepared.record.clone()),
        config: Some(config.clone()),
    };
    let holdout_error = match &prepared.holdout {
        Some(h) => Some(evaluate(&doc.model, doc.standardization.as_ref(), h).abort()?.error),
        None => None,
    };
    let outputs = OutputRecord {
        model: a.out_dir.join(MODEL_FILE),
        report: a.out_dir.join(REPORT_FILE),
        manifest: a.out_dir.join(MANIFEST_FILE),
    };
    write_file(&outputs.model, &serialize_model(&doc).abort()?).abort()?;
    write_report(&outputs.report, &outcome).abort()?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        input: InputRecord {
            path: input.clone(),
            target: a.data.target.clone(),
            rows: raw.len(),
            sha256: content_hash(&input).abort()?,
        },
        split: SplitRecord {
            holdout: a.data.holdout,
            seed: split_seed,
            train_rows: n_train,
            holdout_rows: prepared.holdout.as_ref().map_or(0, |h| h.len()),
        },
        resumed_from: a.resume.clone(),
        config,
        cluster: ClusterRecord {
            workers: a.workers,
            transport: transport_name(a.transport).into(),
            data: data_mode.into(),
            partition_seed,
            checkpoint_every: a.checkpoint_every,
            checkpoint_dir,
        },
        outputs: outputs.clone(),
        result: ResultRecord {
            restarts,
            iterations: outcome.report.iterations.len(),
            converged: outcome.report.converged,
            final_fic: outcome.report.final_fic,
            active_experts: outcome.model.topology.active_count(),
            total_bytes: outcome.report.total_bytes(),
            holdout_error,
        },
    };
    write_file(&outputs.manifest, &manifest.to_toml().abort()?).abort()?;

    let r = &manifest.result;
    println!(
        "{} iterations, converged {}, {} active experts, final FIC {}",
        r.iterations,
        r.converged,
        r.active_experts,
        r.final_fic.map_or("n/a".into(), |f| format!("{f:.6}"))
    );
    if let Some(e) = holdout_error {
        let metric = if task == TaskKind::Regression { "RMSE" } else { "0-1 error" };
        println!("holdout {metric} {e:.6}");
    }
    println!("wrote {}, {} and {}", outputs.model.display(), outputs.report.display(), outputs.manifest.display());
    Ok(())
}

/// Feature rows of `path`, dropping a column named `target` if present.
fn feature_rows(path: &Path, target: &str, task: TaskKind) -> CmdResult<(Vec<f64>, usize)> {
    let table = read_csv(path, Some(target), task).with_context(|| format!("loading {}", path.display())).usage()?;
    Ok((table.x, table.feature_names.len()))
}

pub fn predict(a: &PredictArgs) -> CmdResult {
    let doc = read_model(&a.model)?;
    let path = resolve(&a.data);
    let (x, dim) = feature_rows(&path, &a.target, doc.model.task)?;
    let preds = predict_rows(&doc.model, doc.standardization.as_ref(), &x, dim).usage()?;
    let sink: Box<dyn std::io::Write> = match &a.out {
        Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display())).usage()?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    let write = |w: &mut csv::Writer<Box<dyn std::io::Write>>| -> anyhow::Result<()> {
        match doc.model.task {
            TaskKind::Regression => {
                w.write_record(["prediction", "expert"])?;
                for p in &preds {
                    w.write_record([p.value.to_string(), p.expert.to_string()])?;
                }
            }
            TaskKind::Classification => {
                w.write_record(["prediction", "probability", "expert"])?;
                for p in &preds {
                    w.write_record([p.label().to_string(), p.value.to_string(), p.expert.to_string()])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    };
    write(&mut w).abort()
}

pub fn evaluate_cmd(a: &EvaluateArgs) -> CmdResult {
    let doc = read_model(&a.model)?;
    let data = load(&resolve(&a.data), &a.target, doc.model.task).usage()?;
    let ev = evaluate(&doc.model, doc.standardization.as_ref(), &data).usage()?;
    let metric = match ev.task {
        TaskKind::Regression => "rmse",
        TaskKind::Classification => "zero_one_error",
    };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{metric} {:.6}", ev.error);
    let _ = writeln!(out, "samples {}", ev.samples);
    for j in doc.model.topology.active_experts() {
        let _ = writeln!(out, "expert {j} {}", ev.assignments[j]);
    }
    Ok(())
}

pub fn inspect(a: &InspectArgs) -> CmdResult {
    let doc = read_model(&a.model)?;
    print!("{}", render(&doc, a.standardized));
    Ok(())
}

pub fn worker(a: &WorkerArgs) -> CmdResult {
    let worker = match &a.data {
        None => Worker::awaiting_data(),
        Some(p) => {
            let path = resolve(p);
            let raw = load(&path, &a.target, a.task.into()).usage()?;
            let train = prepare(&raw, a.holdout, a.split_seed).usage()?.train;
            Worker::with_loader(Box::new(move |setup| {
                let mut parts = partition_dataset(&train, setup.workers, setup.partition_seed)?;
                if setup.index >= parts.len() {
                    return Err(dfab_runtime::Error::Config(format!("worker index {} out of range", setup.index)));
                }
                Ok(parts.swap_remove(setup.index))
            }))
        }
    };
    serve_tcp(a.connect.as_str(), worker, Duration::from_secs(a.connect_timeout)).map_err(from_runtime)
}
