//! Single-process reference trainer. Every pass is a plain loop over the full
//! dataset: no partitions, no messages, no histograms. It exists to check the
//! distributed runtime against.

use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::experts::{foba_logistic, foba_regression, ls_fit_moments, weighted_logistic_fit, PenalizedObjective, WeightedMoments};
use crate::gates::{build_split_grid, SplitGrid};
use crate::init::{init_model, init_responsibility_row};
use crate::model::{clamp_prob, scaling_factor, ModelParams, TaskKind};
use crate::objective::MASS_FLOOR;

#[derive(Debug, Clone)]
pub struct SerialRun {
    pub model: ModelParams,
    /// Objective at the start of each iteration.
    pub fic: Vec<f64>,
    /// Active experts after each iteration's shrinkage.
    pub active: Vec<usize>,
    pub final_fic: Option<f64>,
    pub converged: bool,
}

struct Masses {
    nphi: Vec<f64>,
    nbeta: Vec<f64>,
    nscaled: Vec<f64>,
}

fn masses(q: &[f64], ell: &[f64], model: &ModelParams) -> Masses {
    let e = model.n_experts();
    let mut nphi = vec![0.0; e];
    let mut nscaled = vec![0.0; e];
    for (qr, lr) in q.chunks_exact(e).zip(ell.chunks_exact(e)) {
        for j in 0..e {
            nphi[j] += qr[j];
            nscaled[j] += qr[j] * lr[j];
        }
    }
    let nbeta = (0..model.n_gates())
        .map(|i| model.topology.experts_under(i).map(|j| nphi[j]).sum())
        .collect();
    Masses { nphi, nbeta, nscaled }
}

/// Refreshes the likelihood and curvature caches, returns the objective and
/// the masses it was computed with.
fn fic_pass(data: &Dataset, model: &ModelParams, q: &[f64], lik: &mut [f64], ell: &mut [f64]) -> (f64, Masses) {
    let e = model.n_experts();
    let mut total = 0.0;
    for n in 0..data.len() {
        let (x, y) = (data.row(n), data.y[n]);
        for j in 0..e {
            let idx = n * e + j;
            if !model.topology.is_active(j) {
                lik[idx] = 0.0;
                ell[idx] = 0.0;
                continue;
            }
            lik[idx] = model.path_log_prob(x, j) + model.expert_log_likelihood(y, x, j);
            ell[idx] = scaling_factor(y, x, &model.experts[j], model.task);
            if q[idx] > 0.0 {
                total += q[idx] * lik[idx] - q[idx] * q[idx].ln();
            }
        }
    }
    let m = masses(q, ell, model);
    let mut fic = total;
    for i in model.topology.live_gates() {
        fic -= model.d_beta / 2.0 * m.nbeta[i].max(MASS_FLOOR).ln();
    }
    for j in model.topology.active_experts() {
        let card = model.experts[j].cardinality();
        if card > 0 {
            fic -= card as f64 / 2.0 * m.nscaled[j].max(MASS_FLOOR).ln();
        }
    }
    (fic, m)
}

fn estep(model: &ModelParams, prev: Option<&Masses>, q: &mut [f64], lik: &[f64], ell: &[f64]) -> Result<()> {
    let e = model.n_experts();
    for n in 0..q.len() / e {
        let mut scores = vec![f64::NEG_INFINITY; e];
        for j in model.topology.active_experts() {
            let mut s = lik[n * e + j];
            if let Some(p) = prev {
                for step in model.topology.path(j) {
                    s -= model.d_beta / (2.0 * p.nbeta[step.gate].max(MASS_FLOOR));
                }
                let card = model.experts[j].cardinality() as f64;
                s -= card * ell[n * e + j] / (2.0 * p.nscaled[j].max(MASS_FLOOR));
            }
            scores[j] = s;
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Numerical(format!("row {n} has no finite score")));
        }
        let row = &mut q[n * e..(n + 1) * e];
        let mut sum = 0.0;
        for j in 0..e {
            row[j] = if model.topology.is_active(j) { (scores[j] - max).exp() } else { 0.0 };
            sum += row[j];
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(())
}

fn shrink(model: &ModelParams, nphi: &[f64], eps: f64, q: &mut [f64], lik: &[f64]) -> Result<ModelParams> {
    let active: Vec<usize> = model.topology.active_experts().collect();
    let mut gone: Vec<usize> = active.iter().copied().filter(|&j| nphi[j] < eps).collect();
    if gone.len() == active.len() {
        let keep = active.iter().copied().fold(active[0], |k, j| if nphi[j] > nphi[k] { j } else { k });
        gone.retain(|&j| j != keep);
    }
    if gone.is_empty() {
        return Ok(model.clone());
    }
    let pruned = model.prune(&gone)?;
    let e = model.n_experts();
    for (n, row) in q.chunks_exact_mut(e).enumerate() {
        for &j in &gone {
            row[j] = 0.0;
        }
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            row.iter_mut().for_each(|v| *v /= sum);
        } else {
            let l = &lik[n * e..(n + 1) * e];
            let alive: Vec<usize> = pruned.topology.active_experts().collect();
            let max = alive.iter().map(|&j| l[j]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = alive.iter().map(|&j| (l[j] - max).exp()).sum();
            for &j in &alive {
                row[j] = (l[j] - max).exp() / total;
            }
        }
    }
    Ok(pruned)
}

/// Samples ordered by each feature, for sweeping thresholds in order.
fn sort_by_feature(data: &Dataset) -> Vec<Vec<u32>> {
    (0..data.dim)
        .map(|d| {
            let mut order: Vec<u32> = (0..data.len() as u32).collect();
            order.sort_by(|&a, &b| data.row(a as usize)[d].total_cmp(&data.row(b as usize)[d]));
            order
        })
        .collect()
}

/// Scores every (feature, threshold) pair on exact per-sample masses,
/// sweeping each feature's sorted samples once.
fn scan_gate(
    data: &Dataset,
    order: &[Vec<u32>],
    model: &ModelParams,
    q: &[f64],
    gate: usize,
    nbeta: f64,
    grid: &SplitGrid,
    cfg: &TrainConfig,
) -> Option<(usize, f64, f64)> {
    let e = model.n_experts();
    let (lr, rr) = (model.topology.left_experts(gate), model.topology.right_experts(gate));
    let left: Vec<f64> = q.chunks_exact(e).map(|r| r[lr.clone()].iter().sum()).collect();
    let right: Vec<f64> = q.chunks_exact(e).map(|r| r[rr.clone()].iter().sum()).collect();
    let right_total: f64 = right.iter().sum();
    let mut best: Option<(f64, usize, f64, f64)> = None;
    for d in 0..data.dim {
        // rho(t) = sum of right masses plus (left - right) over samples below t.
        let mut shift = 0.0;
        let mut next = 0;
        for &t in &grid.thresholds[d] {
            while next < order[d].len() {
                let n = order[d][next] as usize;
                if data.row(n)[d] >= t {
                    break;
                }
                shift += left[n] - right[n];
                next += 1;
            }
            let g = clamp_prob((right_total + shift) / nbeta);
            let xi = cfg.split_score.score(g, nbeta);
            if best.is_none_or(|b| xi > b.0) {
                best = Some((xi, d, t, g));
            }
        }
    }
    best.map(|(_, d, t, g)| (d, t, g))
}

/// Reference run of the full training loop over the whole dataset.
pub fn serial_train(data: &Dataset, cfg: &TrainConfig) -> Result<SerialRun> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut mins = vec![f64::INFINITY; data.dim];
    let mut maxs = vec![f64::NEG_INFINITY; data.dim];
    for row in data.rows() {
        for d in 0..data.dim {
            mins[d] = mins[d].min(row[d]);
            maxs[d] = maxs[d].max(row[d]);
        }
    }
    let grid = build_split_grid(&[(mins, maxs)], cfg.tmax)?;
    let order = sort_by_feature(data);
    let mut model = init_model(cfg, &grid, data.y.iter().sum(), data.len() as f64)?;
    let e = model.n_experts();
    let n = data.len();
    let mut q = vec![0.0; n * e];
    for (i, row) in q.chunks_exact_mut(e).enumerate() {
        init_responsibility_row(row, cfg.seed, i);
    }
    let mut lik = vec![0.0; n * e];
    let mut ell = vec![0.0; n * e];

    let mut run = SerialRun {
        model: model.clone(),
        fic: Vec::new(),
        active: Vec::new(),
        final_fic: None,
        converged: false,
    };
    for t in 1..=cfg.max_iters {
        let (fic, current) = fic_pass(data, &model, &q, &mut lik, &mut ell);
        let prev_fic = run.fic.last().copied();
        run.fic.push(fic);
        if let Some(p) = prev_fic {
            if (fic - p).abs() < cfg.delta_term * p.abs() {
                run.converged = true;
                run.final_fic = Some(fic);
                break;
            }
        }

        estep(&model, (t > 1).then_some(&current), &mut q, &lik, &ell)?;
        let after_e = masses(&q, &ell, &model);
        model = shrink(&model, &after_e.nphi, cfg.eps_shrink, &mut q, &lik)?;
        let post = masses(&q, &ell, &model);
        run.active.push(model.topology.active_count());

        let live: Vec<usize> = model.topology.live_gates().collect();
        for i in live {
            if post.nbeta[i] > 0.0 {
                if let Some((gamma, threshold, g)) = scan_gate(data, &order, &model, &q, i, post.nbeta[i], &grid, cfg) {
                    model.gates[i] = crate::model::GateParams { gamma, threshold, g };
                }
            }
        }

        let active: Vec<usize> = model.topology.active_experts().collect();
        for j in active {
            let col: Vec<f64> = q.chunks_exact(e).map(|r| r[j]).collect();
            let penalty = PenalizedObjective { workers: 1, nphi_scaled: post.nscaled[j] };
            let fitted = match model.task {
                TaskKind::Regression => match WeightedMoments::from_rows(&data.x, &data.y, data.dim, &col) {
                    Some(m) => {
                        let cand = foba_regression(&m, &penalty, &cfg.foba)?;
                        Some(ls_fit_moments(&m, &cand.support)?.params)
                    }
                    None => None,
                },
                TaskKind::Classification => match foba_logistic(&data.x, &data.y, data.dim, &col, &penalty, &cfg.foba)? {
                    Some(cand) => weighted_logistic_fit(&data.x, &data.y, data.dim, &col, &cand.support)?.map(|f| f.params),
                    None => None,
                },
            };
            if let Some(p) = fitted {
                model.experts[j] = p;
            }
        }
        run.model = model.clone();
    }
    if !run.converged && cfg.max_iters > 0 {
        let (fic, _) = fic_pass(data, &model, &q, &mut lik, &mut ell);
        run.final_fic = Some(fic);
    }
    run.model = model;
    Ok(run)
}
