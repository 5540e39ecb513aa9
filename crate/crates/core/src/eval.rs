//! Predictive metrics, attribution sparsity measures and significance tests.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{add_gaussian_noise, Dataset};
use crate::error::{shape_err, Error, Result};
use crate::nn::Model;
use crate::par::{self, Exec};
use crate::rng::{self, TAG_NOISE};

/// Area under the ROC curve as the Mann–Whitney statistic; ties count 1/2.
pub fn roc_auc(scores: ArrayView1<'_, f64>, labels: ArrayView1<'_, f64>) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(shape_err(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let mut pairs: Vec<(f64, bool)> = scores.iter().zip(labels).map(|(&s, &l)| (s, l == 1.0)).collect();
    let pos = pairs.iter().filter(|p| p.1).count();
    let neg = pairs.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of midranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j + 1 < pairs.len() && pairs[j + 1].0 == pairs[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * pairs[i..=j].iter().filter(|p| p.1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// `1 - SSE/SST`.
pub fn r_squared(pred: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> Result<f64> {
    if pred.len() != y.len() {
        return Err(shape_err(format!("{} predictions for {} targets", pred.len(), y.len())));
    }
    if y.len() < 2 {
        return Err(Error::DegenerateTarget);
    }
    let mean = y.mean().unwrap();
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if sst == 0.0 {
        return Err(Error::DegenerateTarget);
    }
    let sse: f64 = pred.iter().zip(y).map(|(p, v)| (p - v).powi(2)).sum();
    Ok(1.0 - sse / sst)
}

/// Fraction of correct predictions from model outputs: a 0.5 threshold for a
/// single output, argmax otherwise.
pub fn accuracy(outputs: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>) -> Result<f64> {
    if outputs.nrows() != y.len() || y.is_empty() {
        return Err(shape_err(format!("{} outputs for {} labels", outputs.nrows(), y.len())));
    }
    let correct = outputs
        .rows()
        .into_iter()
        .zip(y)
        .filter(|(row, &label)| {
            let pred = if row.len() == 1 {
                (row[0] > 0.5) as usize
            } else {
                row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
            };
            pred as f64 == label
        })
        .count();
    Ok(correct as f64 / y.len() as f64)
}

fn check_nonneg(phibar: ArrayView1<'_, f64>) -> Result<f64> {
    if phibar.iter().any(|&v| v < 0.0 || v.is_nan()) {
        return Err(Error::InvalidAttribution("global attributions must be nonnegative".into()));
    }
    let total: f64 = phibar.sum();
    if phibar.is_empty() || total == 0.0 {
        return Err(Error::DegenerateAttribution);
    }
    Ok(total)
}

/// `Σ_i Σ_j |φ_i - φ_j| / (2 p Σ φ)`, computed from the sorted vector.
pub fn gini_coefficient(phibar: ArrayView1<'_, f64>) -> Result<f64> {
    let total = check_nonneg(phibar)?;
    let mut v = phibar.to_vec();
    v.sort_by(f64::total_cmp);
    let p = v.len() as f64;
    let weighted: f64 = v.iter().enumerate().map(|(r, x)| (2.0 * (r + 1) as f64 - p - 1.0) * x).sum();
    Ok(weighted / (p * total))
}

/// Cumulative share of total attribution with features sorted ascending,
/// starting at 0 and ending at 1 (`p + 1` points).
pub fn lorenz_curve(phibar: ArrayView1<'_, f64>) -> Result<Vec<f64>> {
    let total = check_nonneg(phibar)?;
    let mut v = phibar.to_vec();
    v.sort_by(f64::total_cmp);
    let mut out = Vec::with_capacity(v.len() + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for x in &v {
        acc += x;
        out.push(acc / total);
    }
    *out.last_mut().unwrap() = 1.0;
    Ok(out)
}

pub fn write_lorenz_csv(curve: &[f64], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "fraction,cumulative_share")?;
    let p = (curve.len() - 1) as f64;
    for (i, c) in curve.iter().enumerate() {
        writeln!(w, "{},{c}", i as f64 / p)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub sigmas: Vec<f64>,
    pub mean_accuracy: Vec<f64>,
    pub std_accuracy: Vec<f64>,
    /// Accuracy of each model (rows) at each noise level (columns).
    pub per_model: Vec<Vec<f64>>,
}

impl RobustnessCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "sigma,mean_acc,std_acc")?;
        for i in 0..self.sigmas.len() {
            writeln!(w, "{},{},{}", self.sigmas[i], self.mean_accuracy[i], self.std_accuracy[i])?;
        }
        Ok(())
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, std)
}

/// Test accuracy of each model under additive Gaussian noise. The same noise
/// draw is used for every model at a given `σ`.
pub fn noise_robustness(
    models: &[Model],
    test: &Dataset,
    sigmas: &[f64],
    seed: u64,
    exec: Exec,
) -> Result<RobustnessCurve> {
    if sigmas.is_empty() || sigmas[0] != 0.0 || sigmas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidSpec("noise grid must start at 0 and increase strictly".into()));
    }
    if models.is_empty() {
        return Err(Error::InvalidSpec("no models to evaluate".into()));
    }
    let noisy: Vec<Array2<f64>> = sigmas
        .iter()
        .enumerate()
        .map(|(i, &s)| add_gaussian_noise(test.x.view(), s, rng::derive_seed(seed, &[TAG_NOISE, i as u64])))
        .collect::<Result<_>>()?;
    let per_model = par::try_map_range(exec, models.len(), |m| {
        noisy
            .iter()
            .map(|x| accuracy(models[m].predict_values(x.view())?.view(), test.y.view()))
            .collect::<Result<Vec<f64>>>()
    })?;
    let (mut mean_accuracy, mut std_accuracy) = (Vec::new(), Vec::new());
    for j in 0..sigmas.len() {
        let col: Vec<f64> = per_model.iter().map(|r| r[j]).collect();
        let (m, s) = mean_std(&col);
        mean_accuracy.push(m);
        std_accuracy.push(s);
    }
    Ok(RobustnessCurve { sigmas: sigmas.to_vec(), mean_accuracy, std_accuracy, per_model })
}

/// Majority-class frequency.
pub fn chance_level(y: ArrayView1<'_, f64>) -> f64 {
    let mut counts: Vec<(f64, usize)> = Vec::new();
    for &v in y {
        match counts.iter_mut().find(|c| c.0 == v) {
            Some(c) => c.1 += 1,
            None => counts.push((v, 1)),
        }
    }
    counts.iter().map(|c| c.1).max().unwrap_or(0) as f64 / y.len().max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: f64,
}

/// Two-sided paired t-test of `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 3 {
        return Err(shape_err(format!("paired test needs equal lengths of at least 3, got {} and {}", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let (mean, sd) = mean_std(&d);
    let df = n - 1.0;
    if sd == 0.0 {
        if mean == 0.0 {
            return Ok(TTest { t: 0.0, p: 1.0, df });
        }
        return Err(Error::DegeneratePairs);
    }
    let t = mean / (sd / n.sqrt());
    Ok(TTest { t, p: student_t_two_sided(t, df), df })
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    regularized_incomplete_beta(df / (df + t * t), df / 2.0, 0.5)
}

/// Lanczos approximation of `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta `I_x(a, b)` by Lentz's continued fraction.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(1.0 - x, b, a) / b
    }
}

fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// One-tailed binomial test with `p₀ = 1/2`: `P(X ≥ wins)` for
/// `X ~ Bin(trials, 1/2)`.
pub fn binomial_sign_test(wins: usize, trials: usize) -> f64 {
    if wins == 0 {
        return 1.0;
    }
    let ln_half = 0.5f64.ln() * trials as f64;
    let ln_choose = |k: usize| ln_gamma(trials as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((trials - k) as f64 + 1.0);
    (wins..=trials).map(|k| (ln_choose(k) + ln_half).exp()).sum::<f64>().min(1.0)
}

/// Per-feature mean absolute value of an attribution matrix.
pub fn mean_abs_columns(phi: ArrayView2<'_, f64>) -> Array1<f64> {
    phi.mapv(f64::abs).mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(phi.ncols()))
}
