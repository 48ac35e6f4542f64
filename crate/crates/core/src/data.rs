//! Datasets, CSV loading, standardization and the synthetic piecewise-linear
//! generator.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ExpertParams, GateParams, ModelParams, TaskKind, TreeTopology};

/// Per-column affine maps taking raw values to standardized ones:
/// `z = (v - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub target_mean: f64,
    pub target_scale: f64,
}

impl Standardization {
    pub fn apply_row(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.feature_mean).zip(&self.feature_scale) {
            *v = (*v - m) / s;
        }
    }

    pub fn apply_target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_scale
    }

    pub fn inverse_target(&self, z: f64) -> f64 {
        z * self.target_scale + self.target_mean
    }

    /// The map equivalent to applying `self` and then `next`.
    fn then(&self, next: &Standardization) -> Standardization {
        let compose = |m1: f64, s1: f64, m2: f64, s2: f64| (m1 + m2 * s1, s1 * s2);
        let (feature_mean, feature_scale) = self
            .feature_mean
            .iter()
            .zip(&self.feature_scale)
            .zip(next.feature_mean.iter().zip(&next.feature_scale))
            .map(|((&m1, &s1), (&m2, &s2))| compose(m1, s1, m2, s2))
            .unzip();
        let (target_mean, target_scale) = compose(self.target_mean, self.target_scale, next.target_mean, next.target_scale);
        Standardization {
            feature_mean,
            feature_scale,
            target_mean,
            target_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Row-major `n x dim` feature matrix.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub dim: usize,
    pub task: TaskKind,
    pub feature_names: Vec<String>,
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(x: Vec<f64>, y: Vec<f64>, dim: usize, task: TaskKind) -> Result<Self> {
        if dim == 0 {
            return Err(Error::contract("dataset needs at least one feature"));
        }
        if x.len() != y.len() * dim {
            return Err(Error::contract(format!(
                "{} feature values do not form {} rows of {dim}",
                x.len(),
                y.len()
            )));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite feature at row {}", i / dim)));
        }
        if let Some(i) = y.iter().position(|&v| !task.accepts_target(v)) {
            return Err(Error::contract(format!("target {} at row {i} is invalid for {}", y[i], task.as_str())));
        }
        Ok(Dataset {
            x,
            y,
            dim,
            task,
            feature_names: (0..dim).map(|d| format!("x{d}")).collect(),
            standardization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + Clone {
        self.x.chunks_exact(self.dim)
    }

    /// Rows in the given order; carries the standardization record along.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            x.extend_from_slice(self.row(i));
        }
        Dataset {
            x,
            y: indices.iter().map(|&i| self.y[i]).collect(),
            dim: self.dim,
            task: self.task,
            feature_names: self.feature_names.clone(),
            standardization: self.standardization.clone(),
        }
    }

    pub fn target_mean(&self) -> f64 {
        self.y.iter().sum::<f64>() / self.len() as f64
    }

    /// Applies a standardization record computed elsewhere (e.g. on a
    /// training split).
    pub fn apply_standardization(&self, record: &Standardization) -> Dataset {
        let mut out = self.clone();
        for row in out.x.chunks_exact_mut(self.dim) {
            record.apply_row(row);
        }
        if self.task == TaskKind::Regression {
            for y in &mut out.y {
                *y = record.apply_target(*y);
            }
        }
        out.standardization = Some(match &self.standardization {
            Some(prev) => prev.then(record),
            None => record.clone(),
        });
        out
    }
}

fn mean_and_scale(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let sd = var.sqrt();
    (mean, if sd > 0.0 { sd } else { 1.0 })
}

/// Computes the standardization record of `data` without applying it.
pub fn standardization_of(data: &Dataset) -> Result<Standardization> {
    let n = data.len();
    if n < 2 {
        return Err(Error::contract("standardization needs at least two samples"));
    }
    let (feature_mean, feature_scale) = (0..data.dim)
        .map(|d| mean_and_scale(data.rows().map(move |r| r[d]), n))
        .unzip();
    let (target_mean, target_scale) = match data.task {
        TaskKind::Regression => mean_and_scale(data.y.iter().copied(), n),
        TaskKind::Classification => (0.0, 1.0),
    };
    Ok(Standardization {
        feature_mean,
        feature_scale,
        target_mean,
        target_scale,
    })
}

/// Centers and scales every feature (and regression target) to mean 0 and
/// population standard deviation 1. Constant columns are only centered.
pub fn standardize(data: &Dataset) -> Result<Dataset> {
    Ok(data.apply_standardization(&standardization_of(data)?))
}

/// Seeded shuffle, then split on the raw scale. The training side holds
/// `floor(fraction * N)` samples, kept within `[1, N - 1]`.
pub fn shuffle_split(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::contract(format!("train fraction {fraction} not in (0, 1)")));
    }
    let n = data.len();
    if n < 2 {
        return Err(Error::contract("need at least two samples to split"));
    }
    let n_train = ((fraction * n as f64).floor() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((data.select(&order[..n_train]), data.select(&order[n_train..])))
}

/// `shuffle_split`, then the training part is standardized and its
/// statistics are applied to the test part.
pub fn split_train_test(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = shuffle_split(data, fraction, seed)?;
    if train.len() < 2 {
        return Err(Error::contract("need at least two training samples to standardize"));
    }
    let record = standardization_of(&train)?;
    Ok((train.apply_standardization(&record), test.apply_standardization(&record)))
}

/// Features and (when a target column is named and present) targets read
/// from a headed CSV file.
#[derive(Debug, Clone)]
pub struct CsvTable {
    pub feature_names: Vec<String>,
    pub x: Vec<f64>,
    pub y: Option<Vec<f64>>,
}

pub fn read_csv(path: &Path, target: Option<&str>, task: TaskKind) -> Result<CsvTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(format!("{} header", path.display()), e.to_string()))?
        .clone();
    let target_col = match target {
        Some(name) => headers.iter().position(|h| h == name),
        None => None,
    };
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(c, _)| Some(c) != target_col)
        .map(|(_, h)| h.to_string())
        .collect();
    if feature_names.is_empty() {
        return Err(Error::parse(format!("{} header", path.display()), "no feature columns"));
    }

    let mut x = Vec::new();
    let mut y = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 2; // 1-based, after the header line
        let record = record.map_err(|e| Error::parse(format!("{} row {row}", path.display()), e.to_string()))?;
        if record.len() != headers.len() {
            return Err(Error::parse(
                format!("{} row {row}", path.display()),
                format!("expected {} fields, found {}", headers.len(), record.len()),
            ));
        }
        for (c, cell) in record.iter().enumerate() {
            let location = || format!("{} row {row}, column {} ({})", path.display(), c + 1, &headers[c]);
            if cell.is_empty() {
                return Err(Error::parse(location(), "missing value"));
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::parse(location(), format!("not a number: {cell:?}")))?;
            if !v.is_finite() {
                return Err(Error::parse(location(), format!("non-finite value {cell:?}")));
            }
            if Some(c) == target_col {
                if !task.accepts_target(v) {
                    return Err(Error::parse(
                        location(),
                        format!("label {cell} is not valid for {}", task.as_str()),
                    ));
                }
                y.push(v);
            } else {
                x.push(v);
            }
        }
    }
    if x.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(CsvTable {
        feature_names,
        x,
        y: target_col.map(|_| y),
    })
}

pub fn load_csv(path: &Path, target: &str, task: TaskKind) -> Result<Dataset> {
    let table = read_csv(path, Some(target), task)?;
    let y = table
        .y
        .ok_or_else(|| Error::parse(format!("{} header", path.display()), format!("no target column {target:?}")))?;
    let mut data = Dataset::new(table.x, y, table.feature_names.len(), task)?;
    data.feature_names = table.feature_names;
    Ok(data)
}

/// Writes features then the target column named `target`.
pub fn write_csv(path: &Path, data: &Dataset, target: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    let wrap = |e: csv::Error| Error::parse(path.display().to_string(), e.to_string());
    let mut header: Vec<&str> = data.feature_names.iter().map(String::as_str).collect();
    header.push(target);
    w.write_record(&header).map_err(wrap)?;
    let mut fields = Vec::with_capacity(data.dim + 1);
    for (row, y) in data.rows().zip(&data.y) {
        fields.clear();
        fields.extend(row.iter().map(|v| v.to_string()));
        fields.push(y.to_string());
        w.write_record(&fields).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub depth: u32,
    pub experts: usize,
    pub dim: usize,
    pub n: usize,
    /// Inclusive range of nonzero weights per expert, clipped to `dim`.
    pub nonzero: (usize, usize),
    pub noise: f64,
    /// Read `noise` as a standard deviation instead of a variance.
    pub noise_is_std: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            depth: 3,
            experts: 5,
            dim: 100,
            n: 100_000,
            nonzero: (10, 20),
            noise: 0.1,
            noise_is_std: false,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 16 {
            return Err(Error::contract(format!("depth {} not in 1..=16", self.depth)));
        }
        if self.experts == 0 || self.experts > 1 << self.depth {
            return Err(Error::contract(format!(
                "{} experts do not fit a depth-{} tree (at most {})",
                self.experts,
                self.depth,
                1usize << self.depth
            )));
        }
        if self.dim == 0 || self.n == 0 {
            return Err(Error::contract("dimension and sample count must be positive"));
        }
        let (lo, hi) = self.nonzero;
        if lo == 0 || lo > hi {
            return Err(Error::contract(format!("bad nonzero range [{lo}, {hi}]")));
        }
        if !(self.noise > 0.0) {
            return Err(Error::contract("noise must be positive"));
        }
        Ok(())
    }

    pub fn noise_variance(&self) -> f64 {
        if self.noise_is_std {
            self.noise * self.noise
        } else {
            self.noise
        }
    }
}

/// Picks which leaf slots of the complete tree hold experts: a random chain
/// to full depth first, then random splits of shallower leaves.
fn random_leaf_slots(depth: u32, experts: usize, rng: &mut impl Rng) -> Vec<bool> {
    let level = |node: usize| usize::BITS - 1 - (node + 1).leading_zeros();
    let mut leaves = vec![0usize];
    let mut node = 0usize;
    for _ in 0..(depth as usize).min(experts - 1) {
        leaves.retain(|&l| l != node);
        let (a, b) = (2 * node + 1, 2 * node + 2);
        leaves.extend([a, b]);
        node = if rng.random_bool(0.5) { a } else { b };
    }
    while leaves.len() < experts {
        let open: Vec<usize> = leaves.iter().copied().filter(|&l| level(l) < depth).collect();
        let pick = open[rng.random_range(0..open.len())];
        leaves.retain(|&l| l != pick);
        leaves.extend([2 * pick + 1, 2 * pick + 2]);
    }
    let first_leaf = (1usize << depth) - 1;
    let mut active = vec![false; 1 << depth];
    for mut l in leaves {
        while level(l) < depth {
            l = 2 * l + 1;
        }
        active[l - first_leaf] = true;
    }
    active
}

/// Draws a random hard-gated tree and samples `x ~ U[0,1]^D`,
/// `y ~ N(w_j . x, noise)` from it. Returns the raw data and the generating
/// model.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<(Dataset, ModelParams)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let active = random_leaf_slots(spec.depth, spec.experts, &mut rng);
    let topology = TreeTopology::from_masks(spec.depth, active, None)?;

    let gates = (0..topology.n_gates())
        .map(|_| GateParams {
            gamma: rng.random_range(0..spec.dim),
            threshold: rng.random::<f64>(),
            g: 1.0,
        })
        .collect();

    let variance = spec.noise_variance();
    let lo = spec.nonzero.0.min(spec.dim);
    let hi = spec.nonzero.1.min(spec.dim);
    let experts = (0..topology.n_experts())
        .map(|j| {
            let mut e = ExpertParams::constant(spec.dim, 0.0, variance);
            if topology.is_active(j) {
                let k = rng.random_range(lo..=hi);
                let mut support = index::sample(&mut rng, spec.dim, k).into_vec();
                support.sort_unstable();
                for d in support {
                    e.weights[d] = rng.random::<f64>();
                }
            }
            e
        })
        .collect();
    let truth = ModelParams::new(TaskKind::Regression, 1.0, topology, gates, experts)?;

    let noise = Normal::new(0.0, variance.sqrt()).map_err(|e| Error::contract(e.to_string()))?;
    let mut x = vec![0.0; spec.n * spec.dim];
    let mut y = Vec::with_capacity(spec.n);
    for row in x.chunks_exact_mut(spec.dim) {
        row.iter_mut().for_each(|v| *v = rng.random::<f64>());
        let routed = truth.predict(row)?;
        y.push(routed.value + noise.sample(&mut rng));
    }
    Ok((Dataset::new(x, y, spec.dim, TaskKind::Regression)?, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn csv_file(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_small_csv() {
        let f = csv_file("a,b,y\n1.0,2.0,0.5\n3.0,4.0,1.5\n");
        let d = load_csv(f.path(), "y", TaskKind::Regression).unwrap();
        assert_eq!((d.len(), d.dim), (2, 2));
        assert_eq!(d.row(1), &[3.0, 4.0]);
        assert_eq!(d.feature_names, vec!["a", "b"]);
    }

    #[test]
    fn csv_errors_carry_locations() {
        let f = csv_file("a,y\n1.0,1\n2.0,2\n");
        let err = load_csv(f.path(), "y", TaskKind::Classification).unwrap_err().to_string();
        assert!(err.contains("row 3") && err.contains("label 2"), "{err}");

        let f = csv_file("a,y\n1.0,1\n,1\n");
        let err = load_csv(f.path(), "y", TaskKind::Regression).unwrap_err().to_string();
        assert!(err.contains("missing value") && err.contains("row 3"), "{err}");

        let f = csv_file("a,y\n1.0,1\n2.0\n");
        assert!(load_csv(f.path(), "y", TaskKind::Regression).is_err());

        let f = csv_file("a,y\nfoo,1\n");
        let err = load_csv(f.path(), "y", TaskKind::Regression).unwrap_err().to_string();
        assert!(err.contains("column 1"), "{err}");
    }

    #[test]
    fn header_only_is_empty() {
        let f = csv_file("a,b,y\n");
        assert!(matches!(load_csv(f.path(), "y", TaskKind::Regression), Err(Error::EmptyDataset)));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let (data, _) = synth_generate(&SyntheticSpec { n: 50, dim: 4, nonzero: (1, 3), seed: 3, ..Default::default() }).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_csv(f.path(), &data, "y").unwrap();
        let back = load_csv(f.path(), "y", TaskKind::Regression).unwrap();
        assert_eq!(back.x, data.x);
        assert_eq!(back.y, data.y);
    }

    #[test]
    fn standardize_examples() {
        let d = Dataset::new(vec![0.0, 5.0, 2.0, 5.0], vec![1.0, 3.0], 2, TaskKind::Regression).unwrap();
        let s = standardize(&d).unwrap();
        assert_eq!(s.x, vec![-1.0, 0.0, 1.0, 0.0]);
        assert_eq!(s.y, vec![-1.0, 1.0]);
        let record = s.standardization.as_ref().unwrap();
        assert_eq!(record.inverse_target(1.0), 3.0);
    }

    #[test]
    fn standardize_twice_is_identity() {
        let (data, _) = synth_generate(&SyntheticSpec { n: 500, dim: 5, nonzero: (1, 5), seed: 1, ..Default::default() }).unwrap();
        let once = standardize(&data).unwrap();
        let twice = standardize(&once).unwrap();
        for (a, b) in once.x.iter().zip(&twice.x) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in once.y.iter().zip(&twice.y) {
            assert!((a - b).abs() < 1e-12);
        }
        // the composed record still maps back to raw units
        let rec = twice.standardization.as_ref().unwrap();
        assert!((rec.inverse_target(twice.y[7]) - data.y[7]).abs() < 1e-10);
    }

    #[test]
    fn split_sizes() {
        let d = Dataset::new((0..10).map(f64::from).collect(), (0..10).map(f64::from).collect(), 1, TaskKind::Regression).unwrap();
        let (tr, te) = split_train_test(&d, 0.8, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        let (tr2, _) = split_train_test(&d, 0.8, 1).unwrap();
        assert_eq!(tr.x, tr2.x);
        let (tr, te) = split_train_test(&d, 0.999, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (9, 1));
        assert!(split_train_test(&d, 1.0, 1).is_err());
        assert_eq!(tr.standardization, te.standardization);
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = SyntheticSpec { n: 200, dim: 25, seed: 9, ..Default::default() };
        let (a, ta) = synth_generate(&spec).unwrap();
        let (b, tb) = synth_generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn synth_cardinalities_and_topology() {
        for seed in 0..20 {
            let spec = SyntheticSpec { n: 10, dim: 30, depth: 3, experts: 4, seed, ..Default::default() };
            let (_, truth) = synth_generate(&spec).unwrap();
            assert_eq!(truth.topology.active_count(), 4);
            for j in truth.topology.active_experts() {
                let k = truth.experts[j].cardinality();
                assert!((10..=20).contains(&k), "expert {j} has {k} nonzeros");
            }
            // the forced chain reaches full depth
            assert!(truth.topology.active_experts().any(|j| truth.topology.path(j).len() == 3));
        }
        // nonzero range clipped to small D
        let spec = SyntheticSpec { n: 10, dim: 6, experts: 2, depth: 1, ..Default::default() };
        let (_, truth) = synth_generate(&spec).unwrap();
        assert!(truth.experts.iter().all(|e| e.cardinality() == 6));
    }

    #[test]
    fn synth_rejects_too_many_experts() {
        let spec = SyntheticSpec { experts: 9, depth: 3, ..Default::default() };
        assert!(synth_generate(&spec).is_err());
    }

    #[test]
    fn synth_noise_matches_variance() {
        let spec = SyntheticSpec { n: 100_000, dim: 20, depth: 3, experts: 4, seed: 5, ..Default::default() };
        let (data, truth) = synth_generate(&spec).unwrap();
        let residuals: Vec<f64> = data
            .rows()
            .zip(&data.y)
            .map(|(x, y)| y - truth.predict(x).unwrap().value)
            .collect();
        let n = residuals.len() as f64;
        let mean = residuals.iter().sum::<f64>() / n;
        let var = residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 0.1).abs() < 0.01, "residual variance {var}");
        let rmse = (residuals.iter().map(|r| r * r).sum::<f64>() / n).sqrt();
        assert!((rmse / 0.1f64.sqrt() - 1.0).abs() < 0.05);
    }

    #[test]
    fn standardization_preserves_order() {
        let (data, _) = synth_generate(&SyntheticSpec { n: 300, dim: 3, nonzero: (1, 3), seed: 2, ..Default::default() }).unwrap();
        let s = standardize(&data).unwrap();
        for d in 0..3 {
            for i in 1..data.len() {
                let raw = data.row(i)[d].partial_cmp(&data.row(i - 1)[d]);
                let std = s.row(i)[d].partial_cmp(&s.row(i - 1)[d]);
                assert_eq!(raw, std);
            }
        }
    }
}
