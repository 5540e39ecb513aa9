//! Keep/remove masking metrics for ranking attribution methods.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attrib::AttributionMatrix;
use crate::error::{shape_err, Error, Result};
use crate::eval::binomial_sign_test;
use crate::nn::Model;
use crate::par::{self, Exec};
use crate::rng::{self, TAG_RESAMPLE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    Mean,
    Resample,
    Impute,
}

impl MaskKind {
    pub const ALL: [MaskKind; 3] = [MaskKind::Mean, MaskKind::Resample, MaskKind::Impute];

    fn letter(self) -> char {
        match self {
            MaskKind::Mean => 'M',
            MaskKind::Resample => 'R',
            MaskKind::Impute => 'I',
        }
    }
}

pub const RIDGE: f64 = 1e-6;
pub const DEFAULT_DRAWS: usize = 10;

#[derive(Clone, Debug)]
struct Fitted {
    means: Array1<f64>,
    background: Array2<f64>,
    cov: DMatrix<f64>,
    precision: DMatrix<f64>,
}

/// Replacement rule for masked features, fit on training rows.
#[derive(Clone, Debug)]
pub struct MaskingStrategy {
    pub kind: MaskKind,
    pub draws: usize,
    pub seed: u64,
    fitted: Option<Fitted>,
}

impl MaskingStrategy {
    pub fn new(kind: MaskKind, draws: usize, seed: u64) -> Self {
        Self { kind, draws, seed, fitted: None }
    }

    pub fn fit(mut self, train_x: ArrayView2<'_, f64>) -> Result<Self> {
        let (n, p) = train_x.dim();
        if n < 2 {
            return Err(shape_err("masking statistics need at least two training rows"));
        }
        if self.kind == MaskKind::Resample && self.draws == 0 {
            return Err(Error::InvalidSpec("resample masking needs at least one draw".into()));
        }
        let means = train_x.mean_axis(Axis(0)).unwrap();
        let centred = &train_x - &means;
        let mut cov = centred.t().dot(&centred) / (n as f64 - 1.0);
        cov.diag_mut().mapv_inplace(|v| v + RIDGE);
        let cov = DMatrix::from_fn(p, p, |i, j| cov[[i, j]]);
        let precision = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidSpec("masking covariance is not positive definite".into()))?
            .inverse();
        self.fitted = Some(Fitted { means, background: train_x.to_owned(), cov, precision });
        Ok(self)
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted.is_some()
    }

    fn stats(&self) -> Result<&Fitted> {
        self.fitted.as_ref().ok_or(Error::NotFitted)
    }

    /// Background row indices used for sample `sample` under resampling.
    fn draw_rows(&self, sample: usize) -> Result<Vec<usize>> {
        let n = self.stats()?.background.nrows();
        let mut r = rng::stream(self.seed, &[TAG_RESAMPLE, sample as u64]);
        Ok((0..self.draws).map(|_| r.random_range(0..n)).collect())
    }

    /// Conditional Gaussian mean of the masked entries given the others.
    fn impute(&self, x: ArrayView1<'_, f64>, masked: &[bool]) -> Result<Array1<f64>> {
        let f = self.stats()?;
        let m_idx: Vec<usize> = (0..x.len()).filter(|&i| masked[i]).collect();
        let u_idx: Vec<usize> = (0..x.len()).filter(|&i| !masked[i]).collect();
        let mut out = x.to_owned();
        if m_idx.is_empty() {
            return Ok(out);
        }
        if u_idx.is_empty() {
            return Ok(f.means.clone());
        }
        let du = DVector::from_iterator(u_idx.len(), u_idx.iter().map(|&i| x[i] - f.means[i]));
        let shift = if m_idx.len() <= u_idx.len() {
            // μ_M - Q_MM⁻¹ Q_MU (x_U - μ_U)
            let qmm = f.precision.select_rows(&m_idx).select_columns(&m_idx);
            let qmu = f.precision.select_rows(&m_idx).select_columns(&u_idx);
            let rhs = qmu * du;
            -qmm.cholesky().ok_or_else(|| Error::InvalidSpec("singular precision block".into()))?.solve(&rhs)
        } else {
            // μ_M + Σ_MU Σ_UU⁻¹ (x_U - μ_U)
            let suu = f.cov.select_rows(&u_idx).select_columns(&u_idx);
            let smu = f.cov.select_rows(&m_idx).select_columns(&u_idx);
            let sol = suu.cholesky().ok_or_else(|| Error::InvalidSpec("singular covariance block".into()))?.solve(&du);
            smu * sol
        };
        for (k, &i) in m_idx.iter().enumerate() {
            out[i] = f.means[i] + shift[k];
        }
        Ok(out)
    }
}

/// Masked versions of `x`: one row, or one row per draw under resampling.
pub fn mask_apply(
    x: ArrayView1<'_, f64>,
    masked: &[bool],
    strategy: &MaskingStrategy,
    sample: usize,
) -> Result<Array2<f64>> {
    let f = strategy.stats()?;
    if masked.len() != x.len() || f.means.len() != x.len() {
        return Err(shape_err(format!("mask of {} for {} features", masked.len(), x.len())));
    }
    Ok(match strategy.kind {
        MaskKind::Mean => {
            let row = Array1::from_shape_fn(x.len(), |i| if masked[i] { f.means[i] } else { x[i] });
            row.insert_axis(Axis(0))
        }
        MaskKind::Impute => strategy.impute(x, masked)?.insert_axis(Axis(0)),
        MaskKind::Resample => {
            let rows = strategy.draw_rows(sample)?;
            Array2::from_shape_fn((rows.len(), x.len()), |(d, i)| {
                if masked[i] {
                    f.background[[rows[d], i]]
                } else {
                    x[i]
                }
            })
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Keep,
    Remove,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sign {
    Positive,
    Negative,
    Absolute,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MetricSpec {
    pub direction: Direction,
    pub sign: Sign,
    pub strategy: MaskKind,
}

impl MetricSpec {
    /// All 18 metrics in table order, `KPM` through `RAI`.
    pub fn all() -> Vec<MetricSpec> {
        let mut out = Vec::with_capacity(18);
        for direction in [Direction::Keep, Direction::Remove] {
            for sign in [Sign::Positive, Sign::Negative, Sign::Absolute] {
                for strategy in MaskKind::ALL {
                    out.push(MetricSpec { direction, sign, strategy });
                }
            }
        }
        out
    }

    pub fn name(&self) -> String {
        let d = match self.direction {
            Direction::Keep => 'K',
            Direction::Remove => 'R',
        };
        let s = match self.sign {
            Sign::Positive => 'P',
            Sign::Negative => 'N',
            Sign::Absolute => 'A',
        };
        format!("{d}{s}{}", self.strategy.letter())
    }
}

/// Feature order by ascending key, ties by index.
fn ascending(key: impl Fn(usize) -> f64, p: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p).collect();
    idx.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));
    idx
}

/// Outputs when the first `c` features of `order` are masked, `c = 0..=p`.
fn nested_outputs(
    model: &Model,
    x: ArrayView1<'_, f64>,
    order: &[usize],
    strategy: &MaskingStrategy,
    sample: usize,
) -> Result<Vec<f64>> {
    let p = x.len();
    let mut masked = vec![false; p];
    let mut blocks = Vec::with_capacity(p + 1);
    for c in 0..=p {
        if c > 0 {
            masked[order[c - 1]] = true;
        }
        blocks.push(mask_apply(x, &masked, strategy, sample)?);
    }
    let per = blocks[0].nrows();
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let stacked = ndarray::concatenate(Axis(0), &views).map_err(|e| shape_err(e.to_string()))?;
    let out = model.predict_column(stacked.view(), 0)?;
    Ok((0..=p).map(|c| out.slice(ndarray::s![c * per..(c + 1) * per]).mean().unwrap()).collect())
}

/// Per-sample values along each metric's curve, for one strategy.
struct SampleCurves {
    /// Indexed by sign (P, N, A) then direction (keep, remove); entry `c` is
    /// the value after keeping or removing `c` features.
    values: [[Vec<f64>; 2]; 3],
}

fn sample_curves(
    model: &Model,
    x: ArrayView1<'_, f64>,
    phi: ArrayView1<'_, f64>,
    strategy: &MaskingStrategy,
    sample: usize,
    signs: &[Sign],
) -> Result<SampleCurves> {
    let p = x.len();
    let asc = ascending(|i| phi[i], p);
    let desc: Vec<usize> = asc.iter().rev().copied().collect();
    let abs_asc = ascending(|i| phi[i].abs(), p);
    let abs_desc: Vec<usize> = abs_asc.iter().rev().copied().collect();
    let mut cache: [Option<Vec<f64>>; 4] = Default::default();
    let mut family = |slot: usize, order: &[usize]| -> Result<Vec<f64>> {
        if cache[slot].is_none() {
            cache[slot] = Some(nested_outputs(model, x, order, strategy, sample)?);
        }
        Ok(cache[slot].clone().unwrap())
    };
    let mut values: [[Vec<f64>; 2]; 3] = Default::default();
    for &sign in signs {
        let (keep, remove) = match sign {
            Sign::Positive => {
                // Keep masks least positive first; remove masks most positive first.
                let k = family(0, &asc)?;
                let r = family(1, &desc)?;
                ((0..=p).map(|c| k[p - c]).collect(), r.iter().map(|v| -v).collect::<Vec<_>>())
            }
            Sign::Negative => {
                let k = family(1, &desc)?;
                let r = family(0, &asc)?;
                ((0..=p).map(|c| -k[p - c]).collect(), r)
            }
            Sign::Absolute => {
                let k = family(2, &abs_asc)?;
                let r = family(3, &abs_desc)?;
                let all_masked = k[p];
                let full = r[0];
                (
                    (0..=p).map(|c| (k[p - c] - all_masked).abs()).collect(),
                    r.iter().map(|v| (v - full).abs()).collect(),
                )
            }
        };
        values[sign_index(sign)] = [keep, remove];
    }
    Ok(SampleCurves { values })
}

fn sign_index(s: Sign) -> usize {
    match s {
        Sign::Positive => 0,
        Sign::Negative => 1,
        Sign::Absolute => 2,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub fractions: Vec<f64>,
    pub values: Vec<f64>,
}

/// Trapezoidal area under a curve.
pub fn metric_auc(curve: &Curve) -> Result<f64> {
    if curve.values.is_empty() || curve.values.len() != curve.fractions.len() {
        return Err(shape_err("curve must be nonempty with matching axes"));
    }
    if curve.values.len() == 1 {
        return Ok(curve.values[0]);
    }
    Ok(curve
        .fractions
        .windows(2)
        .zip(curve.values.windows(2))
        .map(|(f, v)| (f[1] - f[0]) * (v[0] + v[1]) / 2.0)
        .sum())
}

fn check_phi(x: ArrayView2<'_, f64>, phi: &AttributionMatrix) -> Result<()> {
    if phi.values.dim() != x.dim() {
        return Err(shape_err(format!("attributions {:?} do not match inputs {:?}", phi.values.dim(), x.dim())));
    }
    Ok(())
}

fn average_curves(per_sample: &[SampleCurves], sign: Sign, dir: Direction, p: usize) -> Curve {
    let d = match dir {
        Direction::Keep => 0,
        Direction::Remove => 1,
    };
    let s = sign_index(sign);
    let n = per_sample.len() as f64;
    let values = (0..=p).map(|c| per_sample.iter().map(|sc| sc.values[s][d][c]).sum::<f64>() / n).collect();
    Curve { fractions: (0..=p).map(|c| c as f64 / p as f64).collect(), values }
}

/// Mean metric value against the number of features kept or removed.
pub fn metric_curve(
    model: &Model,
    x: ArrayView2<'_, f64>,
    phi: &AttributionMatrix,
    spec: MetricSpec,
    strategy: &MaskingStrategy,
    exec: Exec,
) -> Result<Curve> {
    check_phi(x, phi)?;
    if strategy.kind != spec.strategy {
        return Err(Error::InvalidSpec(format!("{} needs a {:?} strategy", spec.name(), spec.strategy)));
    }
    let per = par::try_map_range(exec, x.nrows(), |l| {
        sample_curves(model, x.row(l), phi.values.row(l), strategy, l, &[spec.sign])
    })?;
    Ok(average_curves(&per, spec.sign, spec.direction, x.ncols()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub name: String,
    pub spec: MetricSpec,
    pub score: f64,
    pub curve: Curve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub method: String,
    pub metrics: Vec<MetricResult>,
}

impl BenchmarkResult {
    pub fn scores(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.score).collect()
    }
}

/// All 18 metrics for one attribution matrix. `strategies` holds one fitted
/// strategy per masking kind.
pub fn run_all_18(
    model: &Model,
    x: ArrayView2<'_, f64>,
    phi: &AttributionMatrix,
    strategies: &[MaskingStrategy],
    exec: Exec,
) -> Result<BenchmarkResult> {
    check_phi(x, phi)?;
    let p = x.ncols();
    let mut metrics = Vec::with_capacity(18);
    let mut by_kind = Vec::new();
    for kind in MaskKind::ALL {
        let strategy = strategies
            .iter()
            .find(|s| s.kind == kind)
            .ok_or_else(|| Error::InvalidSpec(format!("no {kind:?} strategy supplied")))?;
        let signs = [Sign::Positive, Sign::Negative, Sign::Absolute];
        let per = par::try_map_range(exec, x.nrows(), |l| {
            sample_curves(model, x.row(l), phi.values.row(l), strategy, l, &signs)
        })?;
        by_kind.push((kind, per));
    }
    for spec in MetricSpec::all() {
        let per = &by_kind.iter().find(|(k, _)| *k == spec.strategy).unwrap().1;
        let curve = average_curves(per, spec.sign, spec.direction, p);
        metrics.push(MetricResult { name: spec.name(), spec, score: metric_auc(&curve)?, curve });
    }
    Ok(BenchmarkResult { method: phi.method.label().to_string(), metrics })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// One-tailed sign-test p-value for `a` beating `b`; ties are dropped.
    pub p_value: f64,
}

/// Per-metric wins of `a` over `b` with a one-tailed binomial test.
pub fn compare_methods(a: &BenchmarkResult, b: &BenchmarkResult) -> Result<Comparison> {
    if a.metrics.len() != b.metrics.len() {
        return Err(shape_err("results cover different metrics"));
    }
    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    for (x, y) in a.metrics.iter().zip(&b.metrics) {
        if x.name != y.name {
            return Err(shape_err(format!("metric {} paired with {}", x.name, y.name)));
        }
        match x.score.total_cmp(&y.score) {
            std::cmp::Ordering::Greater => wins += 1,
            std::cmp::Ordering::Less => losses += 1,
            std::cmp::Ordering::Equal => ties += 1,
        }
    }
    Ok(Comparison { wins, losses, ties, p_value: binomial_sign_test(wins, wins + losses) })
}

/// Ranks methods by the number of pairwise metric wins, most first.
pub fn rank_methods(results: &[BenchmarkResult]) -> Result<Vec<(String, usize)>> {
    let mut out = Vec::new();
    for a in results {
        let mut total = 0;
        for b in results {
            if a.method != b.method {
                total += compare_methods(a, b)?.wins;
            }
        }
        out.push((a.method.clone(), total));
    }
    out.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
    Ok(out)
}

/// Methods × metrics table with a `method` column followed by `KPM..RAI`.
pub fn write_table_csv(results: &[BenchmarkResult], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let names: Vec<String> = MetricSpec::all().iter().map(MetricSpec::name).collect();
    writeln!(w, "method,{}", names.join(","))?;
    for r in results {
        let scores: Vec<String> = r.scores().iter().map(f64::to_string).collect();
        writeln!(w, "{},{}", r.method, scores.join(","))?;
    }
    Ok(())
}
