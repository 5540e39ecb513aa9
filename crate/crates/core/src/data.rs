//! Synthetic generators, splits, standardization, noise and file formats.

use std::f64::consts::TAU;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::priors::FeatureGraph;
use crate::rng::{self, Rng, TAG_DATA, TAG_GRAPH, TAG_NOISE, TAG_SPLIT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Regression,
    Binary,
    Multiclass,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub feature_names: Vec<String>,
    pub task: Task,
    pub grid: Option<(usize, usize)>,
    pub groups: Option<Vec<u64>>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Array1<f64>, task: Task) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(shape_err(format!("{} rows but {} labels", x.nrows(), y.len())));
        }
        let feature_names = (0..x.ncols()).map(|i| format!("feature_{i}")).collect();
        Ok(Self { x, y, feature_names, task, grid: None, groups: None })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), idx),
            y: self.y.select(Axis(0), idx),
            feature_names: self.feature_names.clone(),
            task: self.task,
            grid: self.grid,
            groups: self.groups.as_ref().map(|g| idx.iter().map(|&i| g[i]).collect()),
        }
    }

    /// Labels as class indices, for classification tasks.
    pub fn classes(&self) -> Option<Vec<usize>> {
        match self.task {
            Task::Regression => None,
            _ => Some(self.y.iter().map(|&v| v as usize).collect()),
        }
    }
}

fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normal_matrix(rng: &mut Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || normal(rng))
}

const FEATURE_NOISE: f64 = 0.1;
const LABEL_NOISE: f64 = 0.1;
// Image task shape: blob width as a fraction of the shorter side, and a
// background of a few low-frequency plane waves.
const BLOB_WIDTH: f64 = 0.32;
const TEXTURE_AMP: f64 = 0.3;
const TEXTURE_WAVES: usize = 4;
const TEXTURE_FREQ: f64 = 1.5;

fn linear_labels(x: &Array2<f64>, beta: &Array1<f64>, noise: f64, rng: &mut Rng) -> Array1<f64> {
    x.dot(beta).mapv(|v| v + noise * normal(rng))
}

/// 60 independent standard-normal features with small additive noise and a
/// linear target with seeded coefficients.
pub fn gen_independent_linear_60(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidSpec("dataset needs at least one row".into()));
    }
    let p = 60;
    let mut rb = rng::stream(seed, &[TAG_DATA, 0]);
    let beta = Array1::from_shape_simple_fn(p, || normal(&mut rb));
    let mut r = rng::stream(seed, &[TAG_DATA, 1]);
    let z = normal_matrix(&mut r, (n, p));
    let noise = normal_matrix(&mut r, (n, p));
    let x = z + noise * FEATURE_NOISE;
    let y = linear_labels(&x, &beta, LABEL_NOISE, &mut r);
    Dataset::new(x, y, Task::Regression)
}

/// Population covariance of the correlated-groups generator: 20 disjoint
/// triples with pairwise correlation 0.99, independent across triples.
pub fn correlated_groups_covariance() -> Array2<f64> {
    Array2::from_shape_fn((60, 60), |(i, j)| {
        if i == j {
            1.0
        } else if i / 3 == j / 3 {
            0.99
        } else {
            0.0
        }
    })
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let m = DMatrix::from_fn(n, n, |i, j| a[[i, j]]);
    let c = m.cholesky().ok_or_else(|| Error::InvalidSpec("matrix is not positive definite".into()))?;
    let l = c.l();
    Ok(Array2::from_shape_fn((n, n), |(i, j)| l[(i, j)]))
}

/// Like [`gen_independent_linear_60`] but features come in triples with
/// correlation 0.99.
pub fn gen_correlated_groups_60(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidSpec("dataset needs at least one row".into()));
    }
    let p = 60;
    let mut rb = rng::stream(seed, &[TAG_DATA, 0]);
    let beta = Array1::from_shape_simple_fn(p, || normal(&mut rb));
    let l = cholesky(&correlated_groups_covariance())?;
    let mut r = rng::stream(seed, &[TAG_DATA, 2]);
    let x = normal_matrix(&mut r, (n, p)).dot(&l.t());
    let y = linear_labels(&x, &beta, LABEL_NOISE, &mut r);
    Dataset::new(x, y, Task::Regression)
}

/// Binary images of a wide Gaussian blob in the left (label 0) or right
/// (label 1) half, laid over a smooth random texture, plus per-pixel noise of
/// scale `noise_sigma`.
pub fn gen_image_task(n: usize, h: usize, w: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    if h < 4 || w < 4 {
        return Err(Error::InvalidSpec(format!("image grid {h}x{w} is smaller than 4x4")));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidSpec("noise sigma must be nonnegative".into()));
    }
    let mut r = rng::stream(seed, &[TAG_DATA, 3]);
    let mut x = Array2::<f64>::zeros((n, h * w));
    let mut y = Array1::<f64>::zeros(n);
    let spread = BLOB_WIDTH * h.min(w) as f64;
    let half = w as f64 / 2.0;
    for l in 0..n {
        let right = r.random::<bool>();
        let offset = 2.0 + (half - 3.0) * r.random::<f64>();
        let cx = if right { half - 0.5 + offset } else { half - 0.5 - offset };
        let cy = 1.0 + (h as f64 - 3.0) * r.random::<f64>();
        let waves: Vec<[f64; 4]> = (0..TEXTURE_WAVES)
            .map(|_| {
                let a = normal(&mut r);
                [a, r.random_range(0.0..TEXTURE_FREQ), r.random_range(0.0..TEXTURE_FREQ), r.random_range(0.0..TAU)]
            })
            .collect();
        for i in 0..h {
            for j in 0..w {
                let (fi, fj) = (i as f64, j as f64);
                let blob = (-((fi - cy).powi(2) + (fj - cx).powi(2)) / (2.0 * spread * spread)).exp();
                let texture: f64 = waves
                    .iter()
                    .map(|&[a, fy, fx, ph]| a * (TAU * (fy * fi / h as f64 + fx * fj / w as f64) + ph).cos())
                    .sum::<f64>()
                    / (TEXTURE_WAVES as f64).sqrt();
                x[[l, i * w + j]] = blob + TEXTURE_AMP * texture + noise_sigma * normal(&mut r);
            }
        }
        y[l] = right as u8 as f64;
    }
    let mut d = Dataset::new(x, y, Task::Binary)?;
    d.grid = Some((h, w));
    d.feature_names = (0..h * w).map(|k| format!("pixel_{}_{}", k / w, k % w)).collect();
    Ok(d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphSpec {
    /// Probability of an edge between any two features.
    pub edge_prob: f64,
    /// Edge weights are drawn uniformly from this range.
    pub weight_range: (f64, f64),
    /// Label noise standard deviation relative to the signal's.
    pub noise: f64,
    /// Ridge added to the Laplacian to form the coefficient precision.
    pub ridge: f64,
    /// Features are split into this many contiguous blocks and edges only
    /// join features in the same block.
    pub modules: usize,
}

impl Default for GraphSpec {
    fn default() -> Self {
        Self { edge_prob: 0.1, weight_range: (1.0, 1.0), noise: 1.0, ridge: 0.1, modules: 1 }
    }
}

/// Erdős–Rényi feature graph, optionally restricted to blocks, with coefficients drawn from a Gaussian whose
/// precision is `L + ridge·I`, so `β` varies smoothly over the graph.
pub fn gen_graph_task(n: usize, p: usize, spec: &GraphSpec, seed: u64) -> Result<(Dataset, FeatureGraph)> {
    if p < 4 {
        return Err(Error::InvalidSpec(format!("graph task needs at least 4 features, got {p}")));
    }
    let (lo, hi) = spec.weight_range;
    if !(0.0..=1.0).contains(&spec.edge_prob) || !(lo > 0.0 && hi >= lo) || spec.ridge <= 0.0 || spec.noise < 0.0 || spec.modules == 0 || spec.modules > p {
        return Err(Error::InvalidSpec(format!("invalid graph spec {spec:?}")));
    }
    let mut rg = rng::stream(seed, &[TAG_GRAPH, 0]);
    let module = |i: usize| i * spec.modules / p;
    let mut edges = Vec::new();
    for i in 0..p {
        for j in i + 1..p {
            if module(i) == module(j) && rg.random::<f64>() < spec.edge_prob {
                let wt = if hi > lo { rg.random_range(lo..hi) } else { lo };
                edges.push((i, j, wt));
            }
        }
    }
    let graph = FeatureGraph::from_edges(p, &edges)?;
    let mut precision = graph.laplacian().clone();
    precision.diag_mut().mapv_inplace(|d| d + spec.ridge);
    // β = R⁻ᵀ z with precision = R Rᵀ has covariance precision⁻¹.
    let chol = DMatrix::from_fn(p, p, |i, j| precision[[i, j]])
        .cholesky()
        .ok_or_else(|| Error::InvalidSpec("graph precision is not positive definite".into()))?;
    let mut rb = rng::stream(seed, &[TAG_GRAPH, 1]);
    let z = nalgebra::DVector::from_fn(p, |_, _| normal(&mut rb));
    let beta_v = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::InvalidSpec("singular graph precision".into()))?;
    let beta = Array1::from_iter(beta_v.iter().copied());

    let mut r = rng::stream(seed, &[TAG_DATA, 4]);
    let x = normal_matrix(&mut r, (n, p));
    let signal = x.dot(&beta);
    let scale = if n > 1 { signal.std(0.0) } else { 1.0 };
    let y = signal.mapv(|v| v + spec.noise * scale * normal(&mut r));
    Ok((Dataset::new(x, y, Task::Regression)?, graph))
}

/// Keeps the number of edges and the multiset of weights, placing the edges
/// at uniformly random positions.
pub fn randomize_graph(g: &FeatureGraph, seed: u64) -> Result<FeatureGraph> {
    let p = g.n_nodes();
    let mut weights: Vec<f64> = g.edges().iter().map(|e| e.2).collect();
    let mut r = rng::stream(seed, &[TAG_GRAPH, 2]);
    weights.shuffle(&mut r);
    let pairs = p * p.saturating_sub(1) / 2;
    let slots = index::sample(&mut r, pairs, weights.len());
    let mut all = Vec::with_capacity(pairs);
    for i in 0..p {
        for j in i + 1..p {
            all.push((i, j));
        }
    }
    let edges: Vec<_> = slots.iter().zip(&weights).map(|(s, &w)| (all[s].0, all[s].1, w)).collect();
    FeatureGraph::from_edges(p, &edges)
}

/// Features with a few informative coordinates and a logistic binary label.
pub fn gen_sparse_binary(n: usize, p: usize, informative: usize, seed: u64) -> Result<Dataset> {
    if informative == 0 || informative > p {
        return Err(Error::InvalidSpec(format!("{informative} informative features out of {p}")));
    }
    let mut rb = rng::stream(seed, &[TAG_DATA, 5]);
    let mut beta = Array1::<f64>::zeros(p);
    for i in index::sample(&mut rb, p, informative) {
        let sign = if rb.random::<bool>() { 1.0 } else { -1.0 };
        beta[i] = sign * rb.random_range(1.0..2.0);
    }
    let mut r = rng::stream(seed, &[TAG_DATA, 6]);
    let x = normal_matrix(&mut r, (n, p));
    let y = x.dot(&beta).mapv(|v| (r.random::<f64>() < 1.0 / (1.0 + (-v).exp())) as u8 as f64);
    Dataset::new(x, y, Task::Binary)
}

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Random train/validation/test partition. With `grouped`, every group id
/// lands in exactly one partition.
pub fn split(d: &Dataset, train_frac: f64, val_frac: f64, grouped: bool, seed: u64) -> Result<Splits> {
    let ok = |f: f64| f > 0.0 && f < 1.0;
    if !ok(train_frac) || !ok(val_frac) || train_frac + val_frac >= 1.0 {
        return Err(Error::Split(format!("fractions {train_frac}/{val_frac} must lie in (0,1) and sum below 1")));
    }
    let n = d.n();
    let mut r = rng::stream(seed, &[TAG_SPLIT]);
    let (tr, va, te) = if grouped {
        let groups = d.groups.as_ref().ok_or_else(|| Error::Split("grouped split needs group ids".into()))?;
        let mut ids: Vec<u64> = groups.clone();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() < 3 {
            return Err(Error::Split(format!("{} groups cannot fill three partitions", ids.len())));
        }
        ids.shuffle(&mut r);
        let g = ids.len();
        let n_tr = ((train_frac * g as f64).round() as usize).clamp(1, g - 2);
        let n_va = ((val_frac * g as f64).round() as usize).clamp(1, g - n_tr - 1);
        let part = |set: &[u64]| -> Vec<usize> { (0..n).filter(|&i| set.contains(&groups[i])).collect() };
        (part(&ids[..n_tr]), part(&ids[n_tr..n_tr + n_va]), part(&ids[n_tr + n_va..]))
    } else {
        let n_tr = (train_frac * n as f64).round() as usize;
        let n_va = (val_frac * n as f64).round() as usize;
        if n_tr == 0 || n_va == 0 || n_tr + n_va >= n {
            return Err(Error::Split(format!("{n} rows cannot be split {train_frac}/{val_frac}")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut r);
        (idx[..n_tr].to_vec(), idx[n_tr..n_tr + n_va].to_vec(), idx[n_tr + n_va..].to_vec())
    };
    Ok(Splits { train: d.subset(&tr), val: d.subset(&va), test: d.subset(&te) })
}

/// Random partition into two parts of the given sizes (the rest is dropped).
pub fn split_sizes(d: &Dataset, first: usize, second: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if first + second > d.n() {
        return Err(Error::Split(format!("{first}+{second} rows requested from {}", d.n())));
    }
    let mut idx: Vec<usize> = (0..d.n()).collect();
    idx.shuffle(&mut rng::stream(seed, &[TAG_SPLIT, 1]));
    Ok((d.subset(&idx[..first]), d.subset(&idx[first..first + second])))
}

/// Random train/validation/test partition with exact row counts; rows beyond
/// their sum are dropped. `val` may be 0.
pub fn split_counts(d: &Dataset, train: usize, val: usize, test: usize, seed: u64) -> Result<Splits> {
    if train == 0 || test == 0 || train + val + test > d.n() {
        return Err(Error::Split(format!("{train}/{val}/{test} rows requested from {}", d.n())));
    }
    let mut idx: Vec<usize> = (0..d.n()).collect();
    idx.shuffle(&mut rng::stream(seed, &[TAG_SPLIT, 2]));
    Ok(Splits {
        train: d.subset(&idx[..train]),
        val: d.subset(&idx[train..train + val]),
        test: d.subset(&idx[train + val..train + val + test]),
    })
}

/// Per-feature mean and standard deviation fit on training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<'_, f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(shape_err("cannot standardize an empty matrix"));
        }
        let mean = x.mean_axis(Axis(0)).unwrap();
        // Constant features are centred but not scaled.
        let std = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 0.0 { s } else { 1.0 });
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(shape_err(format!("{} columns, standardizer fit on {}", x.ncols(), self.mean.len())));
        }
        Ok((&x - &self.mean) / &self.std)
    }

    pub fn apply_dataset(&self, d: &Dataset) -> Result<Dataset> {
        Ok(Dataset { x: self.apply(d.x.view())?, ..d.clone() })
    }
}

/// Adds iid `N(0, σ²)` noise to every entry.
pub fn add_gaussian_noise(x: ArrayView2<'_, f64>, sigma: f64, seed: u64) -> Result<Array2<f64>> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidSpec("noise sigma must be nonnegative".into()));
    }
    if sigma == 0.0 {
        return Ok(x.to_owned());
    }
    let mut r = rng::stream(seed, &[TAG_NOISE]);
    Ok(x.mapv(|v| v + sigma * normal(&mut r)))
}

/// Reads a headed CSV with one label column; unparseable feature cells are
/// replaced by their column mean.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Format(format!("label column {label_column:?} not found")))?;
    let names: Vec<String> =
        headers.iter().enumerate().filter(|&(i, _)| i != label_idx).map(|(_, h)| h.to_string()).collect();
    let p = names.len();
    let mut cells = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        if rec.len() != p + 1 {
            return Err(Error::Format(format!("row {} has {} fields, expected {}", line + 1, rec.len(), p + 1)));
        }
        for (i, field) in rec.iter().enumerate() {
            let v = field.trim().parse::<f64>().ok().filter(|v| v.is_finite());
            if i == label_idx {
                labels.push(v.ok_or_else(|| Error::Format(format!("row {}: label {field:?} is not numeric", line + 1)))?);
            } else {
                cells.push(v.unwrap_or(f64::NAN));
            }
        }
    }
    let n = labels.len();
    let mut x = Array2::from_shape_vec((n, p), cells).map_err(|e| Error::Format(e.to_string()))?;
    for mut col in x.columns_mut() {
        let (sum, count) = col.iter().filter(|v| !v.is_nan()).fold((0.0, 0usize), |(s, c), &v| (s + v, c + 1));
        let mean = if count > 0 { sum / count as f64 } else { 0.0 };
        col.mapv_inplace(|v| if v.is_nan() { mean } else { v });
    }
    let task = if labels.iter().all(|&v| v == 0.0 || v == 1.0) { Task::Binary } else { Task::Regression };
    let mut d = Dataset::new(x, Array1::from(labels), task)?;
    d.feature_names = names;
    Ok(d)
}

/// Writes features followed by a `label` column. Values use the shortest
/// representation that parses back to the same number.
pub fn write_csv(d: &Dataset, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{},label", d.feature_names.join(","))?;
    for (row, y) in d.x.rows().into_iter().zip(&d.y) {
        for v in row {
            write!(w, "{v},")?;
        }
        writeln!(w, "{y}")?;
    }
    Ok(())
}

/// Edge list with one `i j weight` line per undirected edge.
pub fn write_edge_list(g: &FeatureGraph, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "# nodes {}", g.n_nodes())?;
    for (i, j, wt) in g.edges() {
        writeln!(w, "{i} {j} {wt}")?;
    }
    Ok(())
}

/// Reads an edge list; `p` is the number of features.
pub fn read_edge_list(path: &Path, p: usize) -> Result<FeatureGraph> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut edges = Vec::new();
    for (no, line) in file.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let parsed = match parts.as_slice() {
            [i, j, w] => i.parse::<usize>().ok().zip(j.parse::<usize>().ok()).zip(w.parse::<f64>().ok()),
            _ => None,
        };
        let ((i, j), w) = parsed.ok_or_else(|| Error::Format(format!("edge list line {}: {line:?}", no + 1)))?;
        edges.push((i, j, w));
    }
    FeatureGraph::from_edges(p, &edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn corr(x: &Array2<f64>, i: usize, j: usize) -> f64 {
        let a = x.column(i);
        let b = x.column(j);
        let (ma, mb) = (a.mean().unwrap(), b.mean().unwrap());
        let cov = a.iter().zip(b).map(|(u, v)| (u - ma) * (v - mb)).sum::<f64>();
        let va = a.iter().map(|u| (u - ma).powi(2)).sum::<f64>();
        let vb = b.iter().map(|v| (v - mb).powi(2)).sum::<f64>();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn independent_linear_moments() {
        let d = gen_independent_linear_60(100_000, 1).unwrap();
        assert_eq!(d.x.dim(), (100_000, 60));
        for m in d.x.mean_axis(Axis(0)).unwrap() {
            assert!(m.abs() <= 0.02, "{m}");
        }
        for (i, j) in [(0, 1), (5, 17), (30, 59), (2, 44), (12, 13)] {
            assert!(corr(&d.x, i, j).abs() <= 0.02);
        }
        assert_eq!(gen_independent_linear_60(50, 4).unwrap(), gen_independent_linear_60(50, 4).unwrap());
        assert_ne!(gen_independent_linear_60(50, 4).unwrap().x, gen_independent_linear_60(50, 5).unwrap().x);
    }

    #[test]
    fn correlated_groups_moments() {
        let d = gen_correlated_groups_60(100_000, 2).unwrap();
        assert_eq!(d.x.dim(), (100_000, 60));
        for t in [0, 7, 19] {
            for (a, b) in [(0, 1), (0, 2), (1, 2)] {
                let c = corr(&d.x, 3 * t + a, 3 * t + b);
                assert!((c - 0.99).abs() <= 0.01, "{c}");
            }
        }
        for (i, j) in [(0, 3), (5, 40), (58, 2)] {
            assert!(corr(&d.x, i, j).abs() <= 0.02);
        }
        assert!(cholesky(&correlated_groups_covariance()).is_ok());
    }

    #[test]
    fn image_task_properties() {
        let d = gen_image_task(1000, 14, 14, 0.0, 3).unwrap();
        assert_eq!(d.grid, Some((14, 14)));
        let ones = d.y.sum();
        assert!((ones - 500.0).abs() <= 50.0, "{ones}");
        assert_eq!(d, gen_image_task(1000, 14, 14, 0.0, 3).unwrap());
        assert!(gen_image_task(10, 3, 14, 0.0, 0).is_err());

        // Linear probe: a centred logistic regression fit by gradient
        // descent separates the classes.
        let x = &d.x - &d.x.mean_axis(Axis(0)).unwrap();
        let mut w = Array1::<f64>::zeros(196);
        let mut b = 0.0;
        for _ in 0..300 {
            let p = x.dot(&w).mapv(|v| 1.0 / (1.0 + (-(v + b)).exp()));
            let err = &p - &d.y;
            w = w - x.t().dot(&err) * (0.5 / 1000.0);
            b -= 0.5 * err.mean().unwrap();
        }
        let acc = x
            .dot(&w)
            .iter()
            .zip(&d.y)
            .filter(|&(s, &y)| ((s + b > 0.0) as u8 as f64) == y)
            .count() as f64
            / 1000.0;
        assert!(acc >= 0.99, "{acc}");
    }

    #[test]
    fn graph_task_properties() {
        let (d, g) = gen_graph_task(200, 32, &GraphSpec::default(), 6).unwrap();
        assert_eq!(d.x.dim(), (200, 32));
        let a = g.adjacency();
        assert_eq!(a, &a.t().to_owned());
        assert!(a.diag().iter().all(|&v| v == 0.0));
        let (d2, g2) = gen_graph_task(200, 32, &GraphSpec::default(), 6).unwrap();
        assert_eq!((d, g), (d2, g2));
        assert!(gen_graph_task(10, 3, &GraphSpec::default(), 0).is_err());
    }

    #[test]
    fn graph_task_coefficients_are_smooth() {
        // Recover β by least squares on noiseless data, then compare its
        // Laplacian form against 1000 permutations.
        let spec = GraphSpec { noise: 0.0, ..GraphSpec::default() };
        let (d, g) = gen_graph_task(400, 24, &spec, 11).unwrap();
        let xm = DMatrix::from_fn(d.n(), d.p(), |i, j| d.x[[i, j]]);
        let ym = nalgebra::DVector::from_iterator(d.n(), d.y.iter().copied());
        let beta_v = (xm.transpose() * &xm).cholesky().unwrap().solve(&(xm.transpose() * ym));
        let beta = Array1::from_iter(beta_v.iter().copied());
        let q = g.quadratic_form(&beta);
        let mut r = rng::stream(0, &[]);
        let mut perm = beta.to_vec();
        let mut below = 0;
        for _ in 0..1000 {
            perm.shuffle(&mut r);
            if g.quadratic_form(&Array1::from(perm.clone())) <= q {
                below += 1;
            }
        }
        assert!(below < 100, "{below} permutations at or below the true form");
    }

    #[test]
    fn randomize_graph_properties() {
        let (_, g) = gen_graph_task(10, 30, &GraphSpec { weight_range: (0.5, 3.0), ..GraphSpec::default() }, 2).unwrap();
        let rg = randomize_graph(&g, 9).unwrap();
        assert_eq!(rg.edges().len(), g.edges().len());
        assert_eq!(rg.adjacency(), &rg.adjacency().t().to_owned());
        let mut a: Vec<f64> = g.edges().iter().map(|e| e.2).collect();
        let mut b: Vec<f64> = rg.edges().iter().map(|e| e.2).collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        let ta: f64 = a.iter().sum();
        let tb: f64 = b.iter().sum();
        assert_eq!(ta, tb);
        assert_ne!(rg, g);
    }

    #[test]
    fn split_examples() {
        let d = gen_independent_linear_60(1000, 0).unwrap();
        let s = split(&d, 0.8, 0.1, false, 3).unwrap();
        assert_eq!((s.train.n(), s.val.n(), s.test.n()), (800, 100, 100));
        let s2 = split(&d, 0.8, 0.1, false, 3).unwrap();
        assert_eq!(s.train, s2.train);
        assert!(split(&d, 0.9, 0.2, false, 0).is_err());

        let mut g = d.clone();
        g.groups = Some((0..1000).map(|i| (i / 7) as u64).collect());
        let s = split(&g, 0.6, 0.2, true, 1).unwrap();
        let ids = |p: &Dataset| -> std::collections::HashSet<u64> { p.groups.clone().unwrap().into_iter().collect() };
        let (a, b, c) = (ids(&s.train), ids(&s.val), ids(&s.test));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        assert_eq!(s.train.n() + s.val.n() + s.test.n(), 1000);

        let mut few = d.subset(&[0, 1, 2, 3]);
        few.groups = Some(vec![0, 0, 1, 1]);
        assert!(matches!(split(&few, 0.5, 0.25, true, 0), Err(Error::Split(_))));

        let c = split_counts(&d, 100, 100, 700, 4).unwrap();
        assert_eq!((c.train.n(), c.val.n(), c.test.n()), (100, 100, 700));
        let mut seen: Vec<u64> = [&c.train, &c.val, &c.test].iter().flat_map(|p| p.y.iter().map(|v| v.to_bits())).collect();
        let before = seen.len();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), before);
        assert!(split_counts(&d, 900, 100, 1, 0).is_err());
    }

    #[test]
    fn standardizer_and_noise() {
        let d = gen_independent_linear_60(500, 3).unwrap();
        let x = d.x.mapv(|v| 3.0 * v + 2.0);
        let s = Standardizer::fit(x.view()).unwrap();
        let z = s.apply(x.view()).unwrap();
        for m in z.mean_axis(Axis(0)).unwrap() {
            assert!(m.abs() <= 1e-10);
        }
        for sd in z.std_axis(Axis(0), 0.0) {
            assert!((sd - 1.0).abs() <= 1e-8);
        }
        assert_eq!(add_gaussian_noise(x.view(), 0.0, 1).unwrap(), x);
        let noisy = add_gaussian_noise(Array2::zeros((400, 50)).view(), 2.0, 1).unwrap();
        assert!((noisy.std(0.0) - 2.0).abs() < 0.05);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let d = gen_independent_linear_60(20, 8).unwrap();
        let path = dir.path().join("d.csv");
        write_csv(&d, &path).unwrap();
        let back = load_csv(&path, "label").unwrap();
        assert!((&back.x - &d.x).iter().all(|v| v.abs() <= 1e-12));
        assert_eq!(back.y, d.y);
        assert!(matches!(load_csv(&path, "nope"), Err(Error::Format(_))));

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "a,b,label\n1,x,0\n3,4,1\n5,6,1\n").unwrap();
        let imp = load_csv(&bad, "label").unwrap();
        assert_eq!(imp.x, array![[1.0, 5.0], [3.0, 4.0], [5.0, 6.0]]);
        assert_eq!(imp.task, Task::Binary);
        std::fs::write(&bad, "a,label\n1,2\n3\n").unwrap();
        assert!(matches!(load_csv(&bad, "label"), Err(Error::Format(_))));
    }

    #[test]
    fn edge_list_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = FeatureGraph::from_edges(5, &[(0, 1, 1.5), (2, 4, 0.25)]).unwrap();
        let path = dir.path().join("g.txt");
        write_edge_list(&g, &path).unwrap();
        assert_eq!(read_edge_list(&path, 5).unwrap(), g);
        std::fs::write(&path, "0 1\n").unwrap();
        assert!(matches!(read_edge_list(&path, 5), Err(Error::Format(_))));
    }

    #[test]
    fn sparse_binary_generator() {
        let d = gen_sparse_binary(400, 20, 4, 1).unwrap();
        assert_eq!(d.x.dim(), (400, 20));
        assert!(d.y.iter().all(|&v| v == 0.0 || v == 1.0));
        let frac = d.y.mean().unwrap();
        assert!(frac > 0.3 && frac < 0.7);
        assert!(gen_sparse_binary(10, 5, 6, 0).is_err());
    }
}
