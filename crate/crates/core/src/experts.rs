//! Responsibility-weighted sparse expert fitting: least squares and logistic
//! refits, the penalized forward-backward greedy search, support voting and
//! weight averaging.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sigmoid, softplus, ExpertParams, TaskKind};
use crate::objective::MASS_FLOOR;
use crate::partition::WorkerPartition;

/// Diagonal jitter added to every normal-equation and Newton system.
pub const RIDGE: f64 = 1e-8;
/// Variance floor of regression experts.
pub const SIGMA2_FLOOR: f64 = 1e-6;
/// A worker with no more local mass than this abstains for the expert.
pub const ABSTAIN_MASS: f64 = 1e-9;
/// Logistic weights and intercepts are confined to `[-CAP, CAP]`.
pub const WEIGHT_CAP: f64 = 30.0;

const LOGISTIC_TOL: f64 = 1e-8;
const LOGISTIC_MAX_ITERS: usize = 100;
const MIN_GAIN: f64 = 1e-10;
const SCREENED_CANDIDATES: usize = 5;
const GEMM_BLOCK: usize = 512;

/// Weighted first and centered second moments of one expert's data.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedMoments {
    pub dim: usize,
    pub mass: f64,
    /// Samples carrying nonzero weight.
    pub count: usize,
    pub mean_x: Vec<f64>,
    pub mean_y: f64,
    /// Row-major `dim x dim`.
    pub cxx: Vec<f64>,
    pub cxy: Vec<f64>,
    pub cyy: f64,
}

impl WeightedMoments {
    /// Two passes over the rows: means first, then centered products. `None`
    /// when the total weight is at most the abstention mass.
    pub fn from_rows(x: &[f64], y: &[f64], dim: usize, q: &[f64]) -> Option<Self> {
        let mut all = accumulate(x, y, dim, q, 1, &[0]);
        all.pop().flatten()
    }
}

/// Moments of several experts in one sweep over the partition; `q` is the
/// row-major responsibility matrix with `stride` columns.
fn accumulate(x: &[f64], y: &[f64], dim: usize, q: &[f64], stride: usize, experts: &[usize]) -> Vec<Option<WeightedMoments>> {
    let n = y.len();
    let k = experts.len();
    let mut mass = vec![0.0; k];
    let mut count = vec![0usize; k];
    let mut sx = vec![0.0; k * dim];
    let mut sy = vec![0.0; k];
    for i in 0..n {
        let row = &x[i * dim..(i + 1) * dim];
        for (s, &j) in experts.iter().enumerate() {
            let w = q[i * stride + j];
            if w == 0.0 {
                continue;
            }
            mass[s] += w;
            count[s] += 1;
            sy[s] += w * y[i];
            for (a, &v) in sx[s * dim..(s + 1) * dim].iter_mut().zip(row) {
                *a += w * v;
            }
        }
    }
    let live: Vec<bool> = mass.iter().map(|&m| m > ABSTAIN_MASS).collect();
    let mean_x: Vec<f64> = (0..k * dim).map(|i| if live[i / dim] { sx[i] / mass[i / dim] } else { 0.0 }).collect();
    let mean_y: Vec<f64> = (0..k).map(|s| if live[s] { sy[s] / mass[s] } else { 0.0 }).collect();

    // Centered products as a blocked gemm: each column of `blk` holds one
    // sample's sqrt(w)-scaled deviations of x and y.
    let p = dim + 1;
    let mut gram: Vec<DMatrix<f64>> = (0..k).map(|_| DMatrix::zeros(p, p)).collect();
    let mut blk = DMatrix::<f64>::zeros(p, GEMM_BLOCK);
    for (s, &j) in experts.iter().enumerate() {
        if !live[s] {
            continue;
        }
        let mx = &mean_x[s * dim..(s + 1) * dim];
        let mut fill = 0;
        for i in 0..n {
            let w = q[i * stride + j];
            if w == 0.0 {
                continue;
            }
            let sw = w.sqrt();
            let row = &x[i * dim..(i + 1) * dim];
            let mut col = blk.column_mut(fill);
            for d in 0..dim {
                col[d] = sw * (row[d] - mx[d]);
            }
            col[dim] = sw * (y[i] - mean_y[s]);
            fill += 1;
            if fill == GEMM_BLOCK {
                gram[s].gemm(1.0, &blk, &blk.transpose(), 1.0);
                fill = 0;
            }
        }
        if fill > 0 {
            let part = blk.columns(0, fill);
            gram[s].gemm(1.0, &part, &part.transpose(), 1.0);
        }
    }
    (0..k)
        .map(|s| {
            if !live[s] {
                return None;
            }
            let g = &gram[s];
            let mut c = vec![0.0; dim * dim];
            for a in 0..dim {
                for b in 0..dim {
                    // Symmetric by construction; read the upper triangle so
                    // both halves agree bitwise.
                    c[a * dim + b] = if a <= b { g[(a, b)] } else { g[(b, a)] };
                }
            }
            Some(WeightedMoments {
                dim,
                mass: mass[s],
                count: count[s],
                mean_x: mean_x[s * dim..(s + 1) * dim].to_vec(),
                mean_y: mean_y[s],
                cxx: c,
                cxy: (0..dim).map(|a| g[(a, dim)]).collect(),
                cyy: g[(dim, dim)],
            })
        })
        .collect()
}

/// Moments of the listed experts over a partition's current responsibilities.
pub fn expert_moments(part: &WorkerPartition, experts: &[usize]) -> Vec<Option<WeightedMoments>> {
    accumulate(part.features(), part.targets(), part.dim(), &part.q, part.n_experts(), experts)
}

fn solve_spd(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(&b));
    }
    a.lu()
        .solve(&b)
        .ok_or_else(|| Error::Numerical("singular weighted normal equations".into()))
}

/// Weighted least-squares fit restricted to a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct LsFit {
    pub params: ExpertParams,
    pub rss: f64,
    pub mass: f64,
    /// Weighted Gaussian log-likelihood at the fitted variance.
    pub loglik: f64,
}

pub fn ls_fit_moments(m: &WeightedMoments, features: &[usize]) -> Result<LsFit> {
    let k = features.len();
    let dim = m.dim;
    let mut w = vec![0.0; k];
    if k > 0 {
        let a = DMatrix::from_fn(k, k, |r, c| m.cxx[features[r] * dim + features[c]] + if r == c { RIDGE } else { 0.0 });
        let b = DVector::from_iterator(k, features.iter().map(|&d| m.cxy[d]));
        w = solve_spd(a, b)?.iter().copied().collect();
    }
    let mut rss = m.cyy;
    for (r, &dr) in features.iter().enumerate() {
        rss -= 2.0 * w[r] * m.cxy[dr];
        for (c, &dc) in features.iter().enumerate() {
            rss += w[r] * w[c] * m.cxx[dr * dim + dc];
        }
    }
    let rss = rss.max(0.0);
    let sigma2 = (rss / m.mass).max(SIGMA2_FLOOR);
    let mut weights = vec![0.0; dim];
    let mut intercept = m.mean_y;
    for (r, &d) in features.iter().enumerate() {
        weights[d] = w[r];
        intercept -= w[r] * m.mean_x[d];
    }
    let loglik = -0.5 * m.mass * (2.0 * std::f64::consts::PI * sigma2).ln() - rss / (2.0 * sigma2);
    Ok(LsFit {
        params: ExpertParams { weights, intercept, sigma2 },
        rss,
        mass: m.mass,
        loglik,
    })
}

/// Weighted least squares over `features` plus an intercept. `None` when the
/// weights carry no mass.
pub fn weighted_ls_fit(x: &[f64], y: &[f64], dim: usize, q: &[f64], features: &[usize]) -> Result<Option<LsFit>> {
    match WeightedMoments::from_rows(x, y, dim, q) {
        Some(m) => ls_fit_moments(&m, features).map(Some),
        None => Ok(None),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub params: ExpertParams,
    /// `sum_n q log sigmoid(y f)`.
    pub loglik: f64,
    pub converged: bool,
    /// Some coordinate ended on the weight cap.
    pub capped: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Weighted logistic log-likelihood and its gradient with respect to
/// `theta = (w_F, b)`.
pub fn logistic_objective(
    x: &[f64],
    y: &[f64],
    dim: usize,
    q: &[f64],
    features: &[usize],
    theta: &[f64],
) -> (f64, Vec<f64>) {
    let k = features.len();
    let mut value = 0.0;
    let mut grad = vec![0.0; k + 1];
    for n in 0..y.len() {
        if q[n] == 0.0 {
            continue;
        }
        let row = &x[n * dim..(n + 1) * dim];
        let f = theta[k] + features.iter().zip(theta).map(|(&d, t)| t * row[d]).sum::<f64>();
        value -= q[n] * softplus(-y[n] * f);
        let r = q[n] * y[n] * sigmoid(-y[n] * f);
        for (g, &d) in grad.iter_mut().zip(features) {
            *g += r * row[d];
        }
        grad[k] += r;
    }
    (value, grad)
}

fn objective_only(x: &[f64], y: &[f64], dim: usize, q: &[f64], features: &[usize], theta: &[f64]) -> f64 {
    let k = features.len();
    let mut value = 0.0;
    for n in 0..y.len() {
        if q[n] == 0.0 {
            continue;
        }
        let row = &x[n * dim..(n + 1) * dim];
        let f = theta[k] + features.iter().zip(theta).map(|(&d, t)| t * row[d]).sum::<f64>();
        value -= q[n] * softplus(-y[n] * f);
    }
    value
}

// Coordinates on the cap whose gradient points further outward.
fn pinned(theta: &[f64], grad: &[f64]) -> Vec<bool> {
    theta
        .iter()
        .zip(grad)
        .map(|(&t, &g)| (t >= WEIGHT_CAP && g > 0.0) || (t <= -WEIGHT_CAP && g < 0.0))
        .collect()
}

fn projected_norm(grad: &[f64], pinned: &[bool]) -> f64 {
    grad.iter().zip(pinned).filter(|(_, &p)| !p).map(|(g, _)| g * g).sum::<f64>().sqrt()
}

/// Damped Newton (IRLS) for the weighted logistic likelihood over `features`
/// plus an intercept, with box constraints at the weight cap.
pub fn weighted_logistic_fit(
    x: &[f64],
    y: &[f64],
    dim: usize,
    q: &[f64],
    features: &[usize],
) -> Result<Option<LogisticFit>> {
    let mass: f64 = q.iter().sum();
    if mass <= ABSTAIN_MASS {
        return Ok(None);
    }
    let k = features.len();
    let p = k + 1;
    let mut theta = vec![0.0; p];
    let (mut value, mut grad) = logistic_objective(x, y, dim, q, features, &theta);
    let mut pins = pinned(&theta, &grad);
    let mut norm = projected_norm(&grad, &pins);
    let mut iterations = 0;
    let mut converged = norm <= LOGISTIC_TOL;
    while !converged && iterations < LOGISTIC_MAX_ITERS {
        iterations += 1;
        let free: Vec<usize> = (0..p).filter(|&i| !pins[i]).collect();
        let mut h = DMatrix::<f64>::zeros(free.len(), free.len());
        let mut z = vec![0.0; p];
        for n in 0..y.len() {
            if q[n] == 0.0 {
                continue;
            }
            let row = &x[n * dim..(n + 1) * dim];
            for (zi, &d) in z.iter_mut().zip(features) {
                *zi = row[d];
            }
            z[k] = 1.0;
            let f: f64 = z.iter().zip(&theta).map(|(a, b)| a * b).sum();
            let mu = sigmoid(f);
            let c = q[n] * mu * (1.0 - mu);
            for (r, &a) in free.iter().enumerate() {
                for (s, &b) in free.iter().enumerate().skip(r) {
                    h[(r, s)] += c * z[a] * z[b];
                }
            }
        }
        for r in 0..free.len() {
            h[(r, r)] += RIDGE;
            for s in 0..r {
                h[(r, s)] = h[(s, r)];
            }
        }
        let g_free = DVector::from_iterator(free.len(), free.iter().map(|&i| grad[i]));
        let step = solve_spd(h, g_free.clone())?;
        let slope: f64 = step.dot(&g_free);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut cand = theta.clone();
            for (r, &i) in free.iter().enumerate() {
                cand[i] = (theta[i] + t * step[r]).clamp(-WEIGHT_CAP, WEIGHT_CAP);
            }
            let v = objective_only(x, y, dim, q, features, &cand);
            if v >= value + 1e-4 * t * slope.max(0.0) {
                accepted = Some((cand, v));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, v)) = accepted else {
            break;
        };
        let moved = cand.iter().zip(&theta).any(|(a, b)| a != b);
        theta = cand;
        let (nv, ng) = logistic_objective(x, y, dim, q, features, &theta);
        debug_assert!(nv >= v - 1e-9 * v.abs().max(1.0));
        value = nv;
        grad = ng;
        pins = pinned(&theta, &grad);
        norm = projected_norm(&grad, &pins);
        converged = norm <= LOGISTIC_TOL;
        if !moved {
            break;
        }
    }
    let capped = theta.iter().any(|t| t.abs() >= WEIGHT_CAP);
    if !converged {
        log::warn!("logistic refit stopped after {iterations} iterations, projected gradient norm {norm:.3e}");
    }
    let mut weights = vec![0.0; dim];
    for (r, &d) in features.iter().enumerate() {
        weights[d] = theta[r];
    }
    Ok(Some(LogisticFit {
        params: ExpertParams { weights, intercept: theta[k], sigma2: 1.0 },
        loglik: value,
        converged,
        capped,
        iterations,
        grad_norm: norm,
    }))
}

/// Per-worker penalized likelihood `W * loglik - |F| * ((W - 1) + ln(N) / 2)`
/// where `N` is the global curvature-weighted mass of the expert.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenalizedObjective {
    pub workers: usize,
    pub nphi_scaled: f64,
}

impl PenalizedObjective {
    pub fn per_feature(&self) -> f64 {
        (self.workers as f64 - 1.0) + 0.5 * self.nphi_scaled.max(MASS_FLOOR).ln()
    }

    pub fn value(&self, loglik: f64, cardinality: usize) -> f64 {
        let scaled = self.workers as f64 * loglik;
        if cardinality == 0 {
            scaled
        } else {
            scaled - cardinality as f64 * self.per_feature()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FobaLimits {
    /// Upper bound on the support size on top of `min(D, n - 1)`.
    pub max_features: Option<usize>,
    /// Forward plus backward moves per search.
    pub max_steps: usize,
}

impl Default for FobaLimits {
    fn default() -> Self {
        FobaLimits {
            max_features: None,
            max_steps: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FobaResult {
    pub params: ExpertParams,
    /// Sorted selected features.
    pub support: Vec<usize>,
    pub objective: f64,
    pub loglik: f64,
}

fn foba_engine<E, C>(max_card: usize, penalty: &PenalizedObjective, limits: &FobaLimits, mut eval: E, mut candidates: C) -> Result<FobaResult>
where
    E: FnMut(&[usize]) -> Result<(f64, ExpertParams)>,
    C: FnMut(&ExpertParams, &[usize]) -> Vec<usize>,
{
    let max_card = limits.max_features.map_or(max_card, |m| m.min(max_card));
    let mut support: Vec<usize> = Vec::new();
    let (mut loglik, mut params) = eval(&support)?;
    let mut objective = penalty.value(loglik, 0);
    let mut steps = 0;
    while support.len() < max_card && steps < limits.max_steps {
        let mut best: Option<(f64, usize, f64, ExpertParams)> = None;
        for d in candidates(&params, &support) {
            let mut trial = support.clone();
            let at = trial.partition_point(|&f| f < d);
            trial.insert(at, d);
            let (ll, p) = eval(&trial)?;
            let j = penalty.value(ll, trial.len());
            if best.as_ref().is_none_or(|b| j > b.0) {
                best = Some((j, d, ll, p));
            }
        }
        let Some((j, d, ll, p)) = best else { break };
        let gain = j - objective;
        if !(gain > MIN_GAIN) {
            break;
        }
        steps += 1;
        let at = support.partition_point(|&f| f < d);
        support.insert(at, d);
        (objective, loglik, params) = (j, ll, p);

        while support.len() > 1 && steps < limits.max_steps {
            let mut weakest: Option<(f64, usize, f64, f64, ExpertParams)> = None;
            for (i, &f) in support.iter().enumerate() {
                let mut trial = support.clone();
                trial.remove(i);
                let (ll, p) = eval(&trial)?;
                let j = penalty.value(ll, trial.len());
                let loss = objective - j;
                if weakest.as_ref().is_none_or(|w| loss < w.0) {
                    weakest = Some((loss, f, j, ll, p));
                }
            }
            let Some((loss, f, j, ll, p)) = weakest else { break };
            if !(loss < 0.5 * gain) {
                break;
            }
            steps += 1;
            support.retain(|&s| s != f);
            (objective, loglik, params) = (j, ll, p);
        }
    }
    Ok(FobaResult {
        params,
        support,
        objective,
        loglik,
    })
}

/// Forward-backward greedy search for a least-squares expert, every move
/// evaluated by a full refit from the cached moments.
pub fn foba_regression(m: &WeightedMoments, penalty: &PenalizedObjective, limits: &FobaLimits) -> Result<FobaResult> {
    let dim = m.dim;
    let max_card = dim.min(m.count.saturating_sub(1));
    foba_engine(
        max_card,
        penalty,
        limits,
        |f| ls_fit_moments(m, f).map(|fit| (fit.loglik, fit.params)),
        |_, support| (0..dim).filter(|d| support.binary_search(d).is_err()).collect(),
    )
}

/// Forward-backward greedy search for a logistic expert; forward moves refit
/// only the inactive features with the largest likelihood gradients.
pub fn foba_logistic(
    x: &[f64],
    y: &[f64],
    dim: usize,
    q: &[f64],
    penalty: &PenalizedObjective,
    limits: &FobaLimits,
) -> Result<Option<FobaResult>> {
    let mass: f64 = q.iter().sum();
    if mass <= ABSTAIN_MASS {
        return Ok(None);
    }
    let count = q.iter().filter(|&&w| w > 0.0).count();
    let max_card = dim.min(count.saturating_sub(1));
    let result = foba_engine(
        max_card,
        penalty,
        limits,
        |f| {
            let fit = weighted_logistic_fit(x, y, dim, q, f)?.ok_or_else(|| Error::Numerical("lost expert mass".into()))?;
            Ok((fit.loglik, fit.params))
        },
        |params, support| {
            let mut grad = vec![0.0; dim];
            for n in 0..y.len() {
                if q[n] == 0.0 {
                    continue;
                }
                let row = &x[n * dim..(n + 1) * dim];
                let r = q[n] * y[n] * sigmoid(-y[n] * params.linear(row));
                for (g, v) in grad.iter_mut().zip(row) {
                    *g += r * v;
                }
            }
            let mut ranked: Vec<usize> = (0..dim).filter(|d| support.binary_search(d).is_err()).collect();
            ranked.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()).then(a.cmp(&b)));
            ranked.truncate(SCREENED_CANDIDATES);
            ranked.sort_unstable();
            ranked
        },
    )?;
    Ok(Some(result))
}

/// Penalized sparse candidate for expert `j` on one partition. `None` means
/// the worker abstains.
pub fn foba_select(
    part: &WorkerPartition,
    expert: usize,
    penalty: &PenalizedObjective,
    limits: &FobaLimits,
) -> Result<Option<FobaResult>> {
    match part.task() {
        TaskKind::Regression => expert_moments(part, &[expert])
            .pop()
            .flatten()
            .map(|m| foba_regression(&m, penalty, limits))
            .transpose(),
        TaskKind::Classification => {
            let q = part.q_column(expert);
            foba_logistic(part.features(), part.targets(), part.dim(), &q, penalty, limits)
        }
    }
}

/// Refit of expert `j` on one partition restricted to `features`.
pub fn restricted_refit(part: &WorkerPartition, expert: usize, features: &[usize]) -> Result<Option<ExpertParams>> {
    let q = part.q_column(expert);
    match part.task() {
        TaskKind::Regression => Ok(weighted_ls_fit(part.features(), part.targets(), part.dim(), &q, features)?.map(|f| f.params)),
        TaskKind::Classification => {
            Ok(weighted_logistic_fit(part.features(), part.targets(), part.dim(), &q, features)?.map(|f| f.params))
        }
    }
}

/// Features selected by at least half of all workers; abstaining workers count
/// towards `workers` but support nothing.
pub fn majority_vote<'a>(supports: impl IntoIterator<Item = &'a [bool]>, dim: usize, workers: usize) -> Vec<usize> {
    let mut counts = vec![0usize; dim];
    for s in supports {
        for (c, &on) in counts.iter_mut().zip(s) {
            *c += on as usize;
        }
    }
    (0..dim).filter(|&d| counts[d] > 0 && 2 * counts[d] >= workers).collect()
}

/// Mean of the contributing fits, or `previous` when every worker abstained.
pub fn average_weights<'a>(fits: impl IntoIterator<Item = Option<&'a ExpertParams>>, previous: &ExpertParams) -> ExpertParams {
    let mut sum = ExpertParams::constant(previous.weights.len(), 0.0, 0.0);
    let mut n = 0usize;
    for fit in fits.into_iter().flatten() {
        n += 1;
        for (a, b) in sum.weights.iter_mut().zip(&fit.weights) {
            *a += b;
        }
        sum.intercept += fit.intercept;
        sum.sigma2 += fit.sigma2;
    }
    if n == 0 {
        return previous.clone();
    }
    let k = n as f64;
    for w in &mut sum.weights {
        *w /= k;
    }
    sum.intercept /= k;
    sum.sigma2 /= k;
    sum
}
