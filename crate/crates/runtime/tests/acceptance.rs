//! Acceptance suite. Prints one `[PASS]`, `[FAIL]` or `[SKIP]` line per
//! criterion and a summary. With `DFAB_ACCEPTANCE_STRICT=1` any failure
//! makes the process exit nonzero. Pass criterion numbers (for example
//! `c2 c6`) to run a subset.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use dfab_core::data::{standardization_of, standardize, synth_generate};
use dfab_core::eval::evaluate;
use dfab_core::experts::{foba_regression, logistic_objective, ls_fit_moments, majority_vote, weighted_logistic_fit, WeightedMoments};
use dfab_core::gates::{build_split_grid, local_gate_stats_all, select_gate};
use dfab_core::model::clamp_prob;
use dfab_core::objective::{local_estep, local_loglik};
use dfab_core::serial::serial_train;
use dfab_core::{
    Dataset, ExpertParams, FobaLimits, GateParams, ModelParams, PenalizedObjective, SplitGrid, SplitScore, SyntheticSpec, TaskKind,
    TrainConfig, TreeTopology, WorkerPartition,
};
use dfab_runtime::{coordinate, pick_best, run_training, Checkpoint, ClusterConfig, DataMode, Job, TrainOutcome, TransportKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

// ---------------------------------------------------------------------------
// Shared recovery dataset: depth-3 truth with 4 experts, D = 20, noise
// variance 0.1, 100k training rows plus a 25k holdout from the same model.
// Training keeps the best of `RESTARTS` seeds by final FIC.

const RECOVERY_TRAIN: usize = 100_000;
const RECOVERY_HOLDOUT: usize = 25_000;
const RESTARTS: u64 = 5;

struct Recovery {
    train: Dataset,
    holdout_raw: Dataset,
    truth: ModelParams,
    config: TrainConfig,
}

fn recovery() -> &'static Recovery {
    static CELL: OnceLock<Recovery> = OnceLock::new();
    CELL.get_or_init(|| {
        let spec = SyntheticSpec {
            depth: 3,
            experts: 4,
            dim: 20,
            n: RECOVERY_TRAIN + RECOVERY_HOLDOUT,
            noise: 0.1,
            seed: 2024,
            ..Default::default()
        };
        let (raw, truth) = synth_generate(&spec).unwrap();
        let train_ids: Vec<usize> = (0..RECOVERY_TRAIN).collect();
        let holdout_ids: Vec<usize> = (RECOVERY_TRAIN..raw.len()).collect();
        let train_raw = raw.select(&train_ids);
        let record = standardization_of(&train_raw).unwrap();
        let config = TrainConfig { depth: 4, tmax: 256, delta_term: 5e-9, max_iters: 400, seed: 0, ..Default::default() }
            .with_eps_fraction(0.03, RECOVERY_TRAIN);
        Recovery { train: train_raw.apply_standardization(&record), holdout_raw: raw.select(&holdout_ids), truth, config }
    })
}

fn holdout_rmse(out: &TrainOutcome) -> f64 {
    let r = recovery();
    evaluate(&out.model, r.train.standardization.as_ref(), &r.holdout_raw).unwrap().error
}

fn recovery_run(workers: usize, seed: u64) -> &'static TrainOutcome {
    static RUNS: OnceLock<std::sync::Mutex<Vec<((usize, u64), &'static TrainOutcome)>>> = OnceLock::new();
    let runs = RUNS.get_or_init(Default::default);
    if let Some((_, out)) = runs.lock().unwrap().iter().find(|(k, _)| *k == (workers, seed)) {
        return out;
    }
    let r = recovery();
    let cfg = TrainConfig { seed, ..r.config.clone() };
    let transport = if workers == 1 { TransportKind::Direct } else { TransportKind::Threads };
    let cluster = ClusterConfig { workers, transport, partition_seed: 1, ..Default::default() };
    let out: &'static TrainOutcome = Box::leak(Box::new(run_training(&r.train, &cfg, &cluster).unwrap()));
    runs.lock().unwrap().push(((workers, seed), out));
    out
}

// ---------------------------------------------------------------------------

fn c1_serial_equivalence() -> Verdict {
    let spec = SyntheticSpec { depth: 3, experts: 5, dim: 10, n: 20_000, nonzero: (2, 5), seed: 1, ..Default::default() };
    let data = standardize(&synth_generate(&spec).unwrap().0).unwrap();
    let cfg = TrainConfig { depth: 3, seed: 5, ..Default::default() }.with_eps_fraction(0.01, data.len());
    let began = Instant::now();
    let serial = serial_train(&data, &cfg).unwrap();
    let cluster = ClusterConfig { workers: 1, transport: TransportKind::Threads, partition_seed: 3, ..Default::default() };
    let out = run_training(&data, &cfg, &cluster).unwrap();
    let secs = began.elapsed().as_secs_f64();
    let fic = out.report.fic_history();
    let worst = fic
        .iter()
        .zip(&serial.fic)
        .map(|(a, b)| (a - b).abs() / b.abs())
        .fold(0.0, f64::max);
    let ok = fic.len() == serial.fic.len() && worst <= 1e-9 && secs < 60.0;
    verdict(ok, format!("{} iterations (reference {}), max relative FIC gap {worst:.2e}, {secs:.1}s", fic.len(), serial.fic.len()))
}

fn c2_recovery() -> Verdict {
    let r = recovery();
    let began = Instant::now();
    let (best, out) = recovery_best(1);
    let secs = began.elapsed().as_secs_f64();
    let runs: Vec<&TrainOutcome> = (0..RESTARTS).map(|s| recovery_run(1, s)).collect();
    let truth_rmse = evaluate(&r.truth, None, &r.holdout_raw).unwrap().error;
    let rmse = holdout_rmse(out);
    let active = out.model.topology.active_count();
    let ok = out.report.converged && (3..=6).contains(&active) && rmse <= 1.10 * truth_rmse && secs < 600.0;
    let tried: Vec<String> = runs
        .iter()
        .map(|o| format!("{:.0}{}", o.report.final_fic.unwrap(), if o.report.converged { "" } else { "(no conv)" }))
        .collect();
    verdict(
        ok,
        format!(
            "seed {best} kept from FIC [{}]: {active} active experts, holdout RMSE {rmse:.4} vs truth {truth_rmse:.4} (ratio {:.3}), {} iterations, converged {}, {secs:.0}s",
            tried.join(" "),
            rmse / truth_rmse,
            out.report.iterations.len(),
            out.report.converged
        ),
    )
}

/// The run kept from the restart seeds with `workers` workers.
fn recovery_best(workers: usize) -> (u64, &'static TrainOutcome) {
    let runs: Vec<TrainOutcome> = (0..RESTARTS).map(|s| recovery_run(workers, s).clone()).collect();
    let seed = pick_best(&runs).unwrap() as u64;
    (seed, recovery_run(workers, seed))
}

fn c3_worker_stability() -> Verdict {
    let (seed, out) = recovery_best(1);
    let base = holdout_rmse(out);
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for w in [2, 4, 8] {
        let out = recovery_run(w, seed);
        let rmse = holdout_rmse(out);
        worst = worst.max((rmse - base).abs() / base);
        parts.push(format!("W={w}: {rmse:.4} ({} experts)", out.model.topology.active_count()));
    }
    verdict(
        worst <= 0.05,
        format!(
            "kept seed {seed}, W=1: {base:.4} ({} experts), {}; worst relative gap {:.2}%",
            out.model.topology.active_count(),
            parts.join(", "),
            100.0 * worst
        ),
    )
}

fn c4_communication_bound() -> Verdict {
    let run = |n: usize| {
        let spec = SyntheticSpec { depth: 3, experts: 4, dim: 20, n, nonzero: (3, 8), seed: 9, ..Default::default() };
        let data = standardize(&synth_generate(&spec).unwrap().0).unwrap();
        let cfg = TrainConfig { depth: 3, tmax: 64, max_iters: 8, delta_term: 1e-15, eps_shrink: 0.0, seed: 2, ..Default::default() };
        let cluster = ClusterConfig { workers: 4, data: DataMode::Ship, partition_seed: 4, ..Default::default() };
        run_training(&data, &cfg, &cluster).unwrap().report
    };
    let (small, large) = (run(10_000), run(100_000));
    let mut setup_small = small.setup.clone();
    let mut setup_large = large.setup.clone();
    let shipped = (setup_small.by_tag.remove("PartitionData"), setup_large.by_tag.remove("PartitionData"));
    let same_iterations = small.iterations.len() == large.iterations.len()
        && small.iterations.iter().zip(&large.iterations).all(|(a, b)| a.traffic == b.traffic);
    let same_setup = setup_small.by_tag == setup_large.by_tag;
    let per_iter = small.iterations.first().map_or(0, |r| r.traffic.total());
    verdict(
        same_iterations && same_setup && !small.iterations.is_empty(),
        format!(
            "{} iterations compared, {per_iter} bytes per iteration in both runs; initial partition shipping {:?} vs {:?} bytes",
            small.iterations.len().min(large.iterations.len()),
            shipped.0.unwrap_or(0),
            shipped.1.unwrap_or(0)
        ),
    )
}

fn c5_speedup() -> Verdict {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    if cores < 8 {
        return Verdict::Skip(format!("needs at least 8 cores, this machine exposes {cores}"));
    }
    let spec = SyntheticSpec { depth: 3, experts: 4, dim: 20, n: 1_000_000, nonzero: (3, 8), seed: 5, ..Default::default() };
    let data = standardize(&synth_generate(&spec).unwrap().0).unwrap();
    let cfg = TrainConfig { depth: 3, max_iters: 4, delta_term: 1e-15, seed: 1, ..Default::default() }.with_eps_fraction(0.01, data.len());
    let mean_ms = |workers: usize| {
        let cluster = ClusterConfig { workers, partition_seed: 2, ..Default::default() };
        let out = run_training(&data, &cfg, &cluster).unwrap();
        out.report.iterations.iter().map(|r| r.millis as f64).sum::<f64>() / out.report.iterations.len() as f64
    };
    let (one, eight) = (mean_ms(1), mean_ms(8));
    verdict(eight <= 0.5 * one, format!("mean iteration {one:.0} ms with 1 worker, {eight:.0} ms with 8 ({:.2}x)", eight / one))
}

fn c6_foba_near_optimality() -> Verdict {
    let (n, d) = (200, 8);
    let mut within = 0;
    let mut never_worse = true;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let x: Vec<f64> = (0..n * d).map(|_| normal(&mut rng)).collect();
        let w: Vec<f64> = (0..d).map(|_| if rng.random_bool(0.4) { normal(&mut rng) } else { 0.0 }).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| x[i * d..(i + 1) * d].iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.5 * normal(&mut rng))
            .collect();
        let q: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let m = WeightedMoments::from_rows(&x, &y, d, &q).unwrap();
        let penalty = PenalizedObjective { workers: 1, nphi_scaled: q.iter().sum() };
        let foba = foba_regression(&m, &penalty, &FobaLimits::default()).unwrap();
        let mut best = f64::NEG_INFINITY;
        let mut empty = f64::NEG_INFINITY;
        for mask in 0u32..(1 << d) {
            let f: Vec<usize> = (0..d).filter(|&k| mask >> k & 1 == 1).collect();
            let j = penalty.value(ls_fit_moments(&m, &f).unwrap().loglik, f.len());
            best = best.max(j);
            if mask == 0 {
                empty = j;
            }
        }
        if (best - foba.objective).abs() <= 1e-9 * best.abs().max(1.0) {
            within += 1;
        }
        never_worse &= foba.objective >= empty - 1e-9 * empty.abs().max(1.0);
    }
    verdict(within >= 90 && never_worse, format!("{within}/100 within 1e-9 of the best subset, never below the empty support: {never_worse}"))
}

/// Posterior over experts by Bayes' rule, computed from first principles.
fn bayes_posterior(model: &ModelParams, x: &[f64], y: f64) -> Vec<f64> {
    let e = model.n_experts();
    let g = model.n_gates();
    let mut joint = vec![0.0; e];
    for (j, slot) in joint.iter_mut().enumerate() {
        let mut prior = 1.0;
        let mut node = g + j;
        while node > 0 {
            let parent = (node - 1) / 2;
            let gate = &model.gates[parent];
            let p = clamp_prob(gate.g);
            let left = if x[gate.gamma] < gate.threshold { p } else { 1.0 - p };
            prior *= if node == 2 * parent + 1 { left } else { 1.0 - left };
            node = parent;
        }
        let phi = &model.experts[j];
        let mean: f64 = phi.intercept + phi.weights.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        let density = (-(y - mean).powi(2) / (2.0 * phi.sigma2)).exp() / (2.0 * std::f64::consts::PI * phi.sigma2).sqrt();
        *slot = prior * density;
    }
    let total: f64 = joint.iter().sum();
    joint.iter().map(|v| v / total).collect()
}

fn c7_estep_oracle() -> Verdict {
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let depth = rng.random_range(1..=2u32);
        let topo = TreeTopology::complete(depth).unwrap();
        let (e, dim) = (topo.n_experts(), rng.random_range(1..=4usize));
        let n = rng.random_range(5..=100usize);
        let gates = (0..topo.n_gates())
            .map(|_| GateParams { gamma: rng.random_range(0..dim), threshold: normal(&mut rng) * 0.5, g: rng.random_range(0.05..0.95) })
            .collect();
        let experts = (0..e)
            .map(|_| ExpertParams {
                weights: (0..dim).map(|_| if rng.random_bool(0.6) { normal(&mut rng) } else { 0.0 }).collect(),
                intercept: normal(&mut rng),
                sigma2: rng.random_range(0.3..2.0),
            })
            .collect();
        let model = ModelParams::new(TaskKind::Regression, 1.0, topo, gates, experts).unwrap();
        let x: Vec<f64> = (0..n * dim).map(|_| normal(&mut rng)).collect();
        let y: Vec<f64> = (0..n).map(|_| 1.5 * normal(&mut rng)).collect();
        let mut part = WorkerPartition::new(x.clone(), y.clone(), dim, TaskKind::Regression, (0..n).collect(), e).unwrap();
        part.q.iter_mut().for_each(|v| *v = 1.0 / e as f64);
        local_loglik(&mut part, &model).unwrap();
        local_estep(&mut part, &model, None).unwrap();
        for i in 0..n {
            let oracle = bayes_posterior(&model, &x[i * dim..(i + 1) * dim], y[i]);
            for (a, b) in part.q_row(i).iter().zip(&oracle) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    verdict(worst <= 1e-10, format!("50 instances, max responsibility gap {worst:.2e}"))
}

/// Exhaustive scan over every candidate split straight from the samples.
fn gate_oracle(part: &WorkerPartition, topo: &TreeTopology, gate: usize, grid: &SplitGrid) -> Option<(usize, f64, f64)> {
    let (l, r) = (topo.left_experts(gate), topo.right_experts(gate));
    let under = topo.experts_under(gate);
    let nbeta: f64 = (0..part.len()).map(|n| part.q_row(n)[under.clone()].iter().sum::<f64>()).sum();
    if !(nbeta > 0.0) {
        return None;
    }
    let mut best: Option<(f64, usize, f64, f64)> = None;
    for d in 0..part.dim() {
        for &t in &grid.thresholds[d] {
            let rho: f64 = (0..part.len())
                .map(|n| {
                    let q = part.q_row(n);
                    if part.row(n)[d] < t {
                        q[l.clone()].iter().sum::<f64>()
                    } else {
                        q[r.clone()].iter().sum::<f64>()
                    }
                })
                .sum();
            let g = clamp_prob(rho / nbeta);
            let xi = nbeta * (g * g.ln() + (1.0 - g) * (1.0 - g).ln());
            if best.is_none_or(|b| xi > b.0) {
                best = Some((xi, d, t, g));
            }
        }
    }
    best.map(|(_, d, t, g)| (d, t, g))
}

fn c8_gate_oracle() -> Verdict {
    let mut agree = 0;
    let mut ties = 0;
    let mut detail = String::new();
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(8000 + seed);
        let dim = rng.random_range(1..=5usize);
        let n = rng.random_range(10..=1000usize);
        let depth = rng.random_range(1..=2u32);
        let topo = TreeTopology::complete(depth).unwrap();
        let e = topo.n_experts();
        // Coarse integer features on a fine grid make many candidates tie.
        let coarse = seed % 2 == 0;
        let x: Vec<f64> =
            (0..n * dim).map(|_| if coarse { rng.random_range(0..4) as f64 } else { rng.random_range(-2.0..2.0) }).collect();
        let y = vec![0.0; n];
        let mut part = WorkerPartition::new(x, y, dim, TaskKind::Regression, (0..n).collect(), e).unwrap();
        for row in part.q.chunks_exact_mut(e) {
            let raw: Vec<f64> = (0..e).map(|_| if coarse { rng.random_range(0..3) as f64 + 0.5 } else { rng.random_range(0.0..1.0) }).collect();
            let s: f64 = raw.iter().sum();
            row.iter_mut().zip(raw).for_each(|(v, r)| *v = r / s);
        }
        let tmax = rng.random_range(2..=32usize);
        let mins: Vec<f64> = (0..dim).map(|d| (0..n).map(|i| part.row(i)[d]).fold(f64::INFINITY, f64::min)).collect();
        let maxs: Vec<f64> = (0..dim).map(|d| (0..n).map(|i| part.row(i)[d]).fold(f64::NEG_INFINITY, f64::max)).collect();
        let grid = build_split_grid(&[(mins, maxs)], tmax).unwrap();
        part.set_grid(grid.clone()).unwrap();
        let stats = local_gate_stats_all(&part, &topo).unwrap();
        let mut ok = true;
        for i in 0..topo.n_gates() {
            let under = topo.experts_under(i);
            let nbeta: f64 = (0..n).map(|k| part.q_row(k)[under.clone()].iter().sum::<f64>()).sum();
            let got = select_gate([&stats[i]], nbeta, &grid, SplitScore::NegEntropy);
            let want = gate_oracle(&part, &topo, i, &grid);
            ok &= match (got, want) {
                (Some(a), Some((d, t, g))) => a.gamma == d && a.threshold == t && (a.g - g).abs() <= 1e-12,
                (None, None) => true,
                _ => false,
            };
            if coarse {
                ties += 1;
            }
        }
        if ok {
            agree += 1;
        } else if detail.is_empty() {
            detail = format!(", first disagreement at instance {seed}");
        }
    }
    verdict(agree == 50, format!("{agree}/50 instances agree ({ties} gates on tie-heavy inputs){detail}"))
}

fn c9_gradient_checks() -> Verdict {
    let mut worst_opt: f64 = 0.0;
    let mut worst_fd: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + seed);
        let (n, d) = (150, 4);
        let x: Vec<f64> = (0..n * d).map(|_| normal(&mut rng)).collect();
        let w: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let f: f64 = x[i * d..(i + 1) * d].iter().zip(&w).map(|(a, b)| a * b).sum();
                if rng.random_range(0.0..1.0) < 1.0 / (1.0 + (-f).exp()) { 1.0 } else { -1.0 }
            })
            .collect();
        let q: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let features: Vec<usize> = (0..d).collect();
        let fit = weighted_logistic_fit(&x, &y, d, &q, &features).unwrap().unwrap();
        let mut theta = fit.params.weights.clone();
        theta.push(fit.params.intercept);
        let (_, grad) = logistic_objective(&x, &y, d, &q, &features, &theta);
        worst_opt = worst_opt.max(grad.iter().map(|g| g * g).sum::<f64>().sqrt());

        let point: Vec<f64> = (0..=d).map(|_| normal(&mut rng)).collect();
        let (_, analytic) = logistic_objective(&x, &y, d, &q, &features, &point);
        let h = 1e-5;
        for k in 0..=d {
            let mut hi = point.clone();
            let mut lo = point.clone();
            hi[k] += h;
            lo[k] -= h;
            let fd = (logistic_objective(&x, &y, d, &q, &features, &hi).0 - logistic_objective(&x, &y, d, &q, &features, &lo).0) / (2.0 * h);
            worst_fd = worst_fd.max((fd - analytic[k]).abs() / analytic[k].abs().max(1e-8));
        }
    }
    verdict(
        worst_opt <= 1e-6 && worst_fd < 1e-4,
        format!("max gradient norm at the optimum {worst_opt:.2e}, max finite-difference relative error {worst_fd:.2e}"),
    )
}

fn c10_invariants() -> Verdict {
    let began = Instant::now();
    let mut failures = Vec::new();

    // Row normalization and repartition invariance.
    let mut max_row_gap: f64 = 0.0;
    for seed in 0..20u64 {
        let (data, model, q) = common::random_state(seed, 60 + 13 * seed as usize);
        let base = common::aggregate(&data, &model, &q, 1, seed);
        for row in base.q.chunks_exact(4) {
            max_row_gap = max_row_gap.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        for workers in [2, 4] {
            if let Err(e) = common::same_aggregates(&base, &common::aggregate(&data, &model, &q, workers, seed + 77)) {
                failures.push(format!("repartition seed {seed} W={workers}: {e}"));
            }
        }
    }
    if max_row_gap > 1e-12 {
        failures.push(format!("row sums off by {max_row_gap:.2e}"));
    }

    // Majority-vote monotonicity.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..500 {
        let workers = rng.random_range(1..8usize);
        let votes: Vec<Vec<bool>> = (0..rng.random_range(1..=workers)).map(|_| (0..6).map(|_| rng.random_bool(0.5)).collect()).collect();
        let before = majority_vote(votes.iter().map(Vec::as_slice), 6, workers);
        let mut more = votes.clone();
        let k = rng.random_range(0..votes.len());
        more[k][rng.random_range(0..6)] = true;
        let after = majority_vote(more.iter().map(Vec::as_slice), 6, workers);
        if !before.iter().all(|d| after.contains(d)) {
            failures.push("an extra vote removed a feature".into());
            break;
        }
    }

    // FIFO and barrier ordering.
    let spec = SyntheticSpec { depth: 2, experts: 3, dim: 4, n: 900, nonzero: (1, 3), seed: 3, ..Default::default() };
    let data = standardize(&synth_generate(&spec).unwrap().0).unwrap();
    let cfg = TrainConfig { depth: 2, tmax: 16, max_iters: 10, delta_term: 1e-15, eps_shrink: 20.0, seed: 3, ..Default::default() };
    let mut traced = common::traced(&data, 3, 5, None);
    let job = Job { config: cfg.clone(), dim: 4, partition_seed: 5, checkpoints: None };
    coordinate(&mut traced, &job, None, None).unwrap();
    for it in 1..=10 {
        if let Err(e) = common::check_trace(&traced.log, 3, it) {
            failures.push(format!("ordering at iteration {it}: {e}"));
            break;
        }
    }

    // Checkpoint and restore replay.
    let dir = tempfile::tempdir().unwrap();
    let cluster = ClusterConfig { workers: 3, partition_seed: 5, checkpoint_dir: Some(dir.path().to_path_buf()), checkpoint_every: 5, ..Default::default() };
    let full = run_training(&data, &cfg, &cluster).unwrap();
    let ckpt = Checkpoint::load(&dir.path().join("checkpoint-t000005.toml")).unwrap();
    let resumed = dfab_runtime::resume(&data, &ckpt, &ClusterConfig { checkpoint_dir: None, ..cluster.clone() }, None).unwrap();
    let same = full.model == resumed.model
        && full.report.fic_history().iter().map(|v| v.to_bits()).eq(resumed.report.fic_history().iter().map(|v| v.to_bits()));
    if !same {
        failures.push("restored run diverged from the uninterrupted run".into());
    }

    let secs = began.elapsed().as_secs_f64();
    if secs >= 300.0 {
        failures.push(format!("suite took {secs:.0}s"));
    }
    if failures.is_empty() {
        Verdict::Pass(format!("row sums within {max_row_gap:.1e}; repartition, vote, ordering and replay checks hold; {secs:.1}s"))
    } else {
        Verdict::Fail(failures.join("; "))
    }
}

fn c11_convergence() -> Verdict {
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 0..10u64 {
        let out = recovery_run(1, seed);
        let first = out.report.iterations[0].fic;
        let last = out.report.final_fic.unwrap();
        ok &= last > first && out.report.converged;
        lines.push(format!("{}{}", if last > first { "+" } else { "-" }, if out.report.converged { "" } else { "(no conv)" }));
    }
    verdict(ok, format!("10 seeds, final FIC above iteration-1 FIC: [{}]", lines.join(" ")))
}

fn main() {
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).map(|a| a.to_lowercase()).collect();
    let criteria: [(&str, &str, fn() -> Verdict); 11] = [
        ("c1", "serial equivalence", c1_serial_equivalence),
        ("c2", "model recovery", c2_recovery),
        ("c3", "worker-count accuracy stability", c3_worker_stability),
        ("c4", "communication bound", c4_communication_bound),
        ("c5", "speedup direction", c5_speedup),
        ("c6", "FoBa near-optimality", c6_foba_near_optimality),
        ("c7", "E-step oracle", c7_estep_oracle),
        ("c8", "gate oracle", c8_gate_oracle),
        ("c9", "gradient checks", c9_gradient_checks),
        ("c10", "invariant suite", c10_invariants),
        ("c11", "convergence sanity", c11_convergence),
    ];
    let (mut passed, mut failed, mut skipped) = (0, 0, 0);
    for (id, name, run) in criteria {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == id) {
            continue;
        }
        let began = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Verdict::Fail(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = began.elapsed().as_secs_f64();
        let (tag, detail) = match v {
            Verdict::Pass(d) => {
                passed += 1;
                ("PASS", d)
            }
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => {
                skipped += 1;
                ("SKIP", d)
            }
        };
        println!("[{tag}] {id:>3} {name}: {detail} [{secs:.1}s]");
    }
    println!("acceptance: {passed} passed, {failed} failed, {skipped} skipped");
    if failed > 0 && std::env::var("DFAB_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
