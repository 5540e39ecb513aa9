//! Feature attributions: input gradients, integrated gradients and expected
//! gradients, plus the batch estimator used inside training objectives.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Activation, Model, Params};
use crate::par::{self, Exec};
use crate::rng::{self, Rng, TAG_EG, TAG_RANDOM_ATTR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ExpectedGradients,
    IntegratedGradients,
    Gradients,
    Random,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::ExpectedGradients => "expected_gradients",
            Method::IntegratedGradients => "integrated_gradients",
            Method::Gradients => "gradients",
            Method::Random => "random",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributionMeta {
    pub k: Option<usize>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
}

/// `n × p` matrix of per-sample, per-feature attributions.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMatrix {
    pub values: Array2<f64>,
    pub method: Method,
    pub meta: AttributionMeta,
}

/// Per-feature mean absolute attribution.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalAttribution(pub Array1<f64>);

/// Background samples drawn from the training data.
#[derive(Clone, Debug)]
pub struct ReferenceSet {
    rows: Array2<f64>,
}

impl ReferenceSet {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::EmptyReferences);
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn n_features(&self) -> usize {
        self.rows.ncols()
    }
}

/// Which output an attribution explains.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum Target {
    /// The same output column for every sample (0 for single-output models).
    #[default]
    First,
    Output(usize),
    /// One class per explained sample.
    PerSample(Vec<usize>),
}

impl Target {
    fn class_of(&self, row: usize) -> usize {
        match self {
            Target::First => 0,
            Target::Output(c) => *c,
            Target::PerSample(v) => v[row],
        }
    }

    fn check(&self, n: usize, outputs: usize) -> Result<()> {
        let bad = match self {
            Target::First => false,
            Target::Output(c) => *c >= outputs,
            Target::PerSample(v) => v.len() != n || v.iter().any(|&c| c >= outputs),
        };
        if bad {
            return Err(shape_err(format!("attribution target {self:?} invalid for {outputs} outputs")));
        }
        Ok(())
    }
}

/// A differentiable map from `n × p` inputs to `n × o` outputs that can be
/// explained.
pub trait Explain: Sync {
    fn n_features(&self) -> usize;
    fn n_outputs(&self) -> usize;
    /// Records the explained outputs of `x` on its tape.
    fn output<'t>(&self, x: Var<'t>) -> Result<Var<'t>>;
}

impl Explain for Model {
    fn n_features(&self) -> usize {
        Model::n_features(self)
    }

    fn n_outputs(&self) -> usize {
        Model::n_outputs(self)
    }

    /// Softmax heads are explained through their logits.
    fn output<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let params = self.bind(x.tape());
        let out = self.forward(&params, x, None)?;
        Ok(if self.head() == Activation::Softmax { out.logits } else { out.out })
    }
}

/// Wraps a closure as an [`Explain`] implementation.
pub struct FnModel<F> {
    features: usize,
    outputs: usize,
    f: F,
}

impl<F> FnModel<F>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>> + Sync,
{
    pub fn new(features: usize, outputs: usize, f: F) -> Self {
        Self { features, outputs, f }
    }
}

impl<F> Explain for FnModel<F>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>> + Sync,
{
    fn n_features(&self) -> usize {
        self.features
    }

    fn n_outputs(&self) -> usize {
        self.outputs
    }

    fn output<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        (self.f)(x)
    }
}

/// Selects one output per row (`n × 1`).
fn select_output<'t>(out: Var<'t>, classes: &[usize]) -> Var<'t> {
    let (n, o) = out.shape();
    if o == 1 {
        return out;
    }
    let mut mask = Array2::<f64>::zeros((n, o));
    for (i, &c) in classes.iter().enumerate() {
        mask[[i, c]] = 1.0;
    }
    out.mul_const(Arc::new(mask)).sum_cols()
}

/// Gradients of the selected output with respect to the rows of `z`, as a
/// node that stays differentiable in the model parameters.
pub fn input_gradients_on_tape<'t>(
    model: &Model,
    params: &Params<'t>,
    z: Var<'t>,
    classes: &[usize],
) -> Result<Var<'t>> {
    let out = model.forward(params, z, None)?;
    let out = if model.head() == Activation::Softmax { out.logits } else { out.out };
    let sel = select_output(out, classes);
    let g = z.tape().grad(sel.sum().id(), &[z.id()])?[0];
    z.tape().var(g)
}

/// Input gradients for each row of `x`.
fn input_gradients<M: Explain + ?Sized>(model: &M, x: Array2<f64>, classes: &[usize]) -> Result<Array2<f64>> {
    let tape = Tape::new();
    let z = tape.leaf(x);
    let out = model.output(z)?;
    let sel = select_output(out, classes);
    let g = tape.grad(sel.sum().id(), &[z.id()])?[0];
    tape.check_finite()?;
    let v = tape.value(g).clone();
    Ok(v)
}

fn check_features<M: Explain + ?Sized>(model: &M, p: usize) -> Result<()> {
    if p != model.n_features() {
        return Err(shape_err(format!("{p} features given, model expects {}", model.n_features())));
    }
    Ok(())
}

/// Plain input gradients `∂f(x)/∂x` for each row.
pub fn grad_attrib<M: Explain + ?Sized>(model: &M, x: ArrayView2<'_, f64>, target: &Target) -> Result<AttributionMatrix> {
    check_features(model, x.ncols())?;
    target.check(x.nrows(), model.n_outputs())?;
    let classes: Vec<usize> = (0..x.nrows()).map(|i| target.class_of(i)).collect();
    Ok(AttributionMatrix {
        values: input_gradients(model, x.to_owned(), &classes)?,
        method: Method::Gradients,
        meta: AttributionMeta::default(),
    })
}

/// Integrated gradients with the midpoint rule: `α_t = (t - 0.5) / steps`.
pub fn integrated_gradients<M: Explain + ?Sized>(
    model: &M,
    x: ArrayView1<'_, f64>,
    baseline: ArrayView1<'_, f64>,
    steps: usize,
    class: usize,
) -> Result<Array1<f64>> {
    if steps == 0 {
        return Err(Error::InvalidSpec("integrated gradients needs at least one step".into()));
    }
    if baseline.len() != x.len() {
        return Err(shape_err(format!("baseline has {} features, input has {}", baseline.len(), x.len())));
    }
    check_features(model, x.len())?;
    let diff = &x - &baseline;
    let path = Array2::from_shape_fn((steps, x.len()), |(t, i)| {
        let alpha = (t as f64 + 0.5) / steps as f64;
        baseline[i] + alpha * diff[i]
    });
    let g = input_gradients(model, path, &vec![class; steps])?;
    Ok(g.mean_axis(Axis(0)).unwrap() * diff)
}

pub fn integrated_gradients_matrix<M: Explain + ?Sized>(
    model: &M,
    x: ArrayView2<'_, f64>,
    baseline: ArrayView1<'_, f64>,
    steps: usize,
    target: &Target,
    exec: Exec,
) -> Result<AttributionMatrix> {
    target.check(x.nrows(), model.n_outputs())?;
    let rows = par::try_map_range(exec, x.nrows(), |i| {
        integrated_gradients(model, x.row(i), baseline, steps, target.class_of(i))
    })?;
    Ok(AttributionMatrix {
        values: stack_rows(&rows, x.ncols()),
        method: Method::IntegratedGradients,
        meta: AttributionMeta { steps: Some(steps), ..Default::default() },
    })
}

fn stack_rows(rows: &[Array1<f64>], p: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), p));
    for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(src);
    }
    out
}

/// Per-draw expected-gradients terms for one sample: row `j` holds
/// `(x - x'_j) ⊙ ∂f(x'_j + α_j (x - x'_j))/∂x` for the `j`-th draw of the
/// sample's stream. Draws are sequential, so the first `k` rows do not depend
/// on how many are requested.
fn eg_terms<M: Explain + ?Sized>(
    model: &M,
    x: ArrayView1<'_, f64>,
    refs: &ReferenceSet,
    k: usize,
    seed: u64,
    row: usize,
    class: usize,
) -> Result<Array2<f64>> {
    let p = x.len();
    let mut rng = rng::stream(seed, &[TAG_EG, row as u64]);
    let mut diffs = Array2::<f64>::zeros((k, p));
    let mut points = Array2::<f64>::zeros((k, p));
    for j in 0..k {
        let r = rng.random_range(0..refs.len());
        let alpha: f64 = rng.random();
        let reference = refs.rows.row(r);
        for i in 0..p {
            let d = x[i] - reference[i];
            diffs[[j, i]] = d;
            points[[j, i]] = reference[i] + alpha * d;
        }
    }
    let g = input_gradients(model, points, &vec![class; k])?;
    Ok(g * diffs)
}

fn check_eg<M: Explain + ?Sized>(model: &M, p: usize, refs: &ReferenceSet, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidSpec("expected gradients needs k >= 1".into()));
    }
    if refs.n_features() != p {
        return Err(shape_err(format!("references have {} features, input has {p}", refs.n_features())));
    }
    check_features(model, p)
}

/// Expected gradients for a single sample: the mean over `k` draws of a
/// reference row and an interpolation point `α ~ U(0, 1)`.
pub fn expected_gradients<M: Explain + ?Sized>(
    model: &M,
    x: ArrayView1<'_, f64>,
    refs: &ReferenceSet,
    k: usize,
    seed: u64,
) -> Result<Array1<f64>> {
    check_eg(model, x.len(), refs, k)?;
    Ok(eg_terms(model, x, refs, k, seed, 0, 0)?.mean_axis(Axis(0)).unwrap())
}

/// Expected gradients for every row of `x`. Row `ℓ` uses its own random
/// stream, so results do not depend on the execution mode.
pub fn expected_gradients_matrix<M: Explain + ?Sized>(
    model: &M,
    x: ArrayView2<'_, f64>,
    refs: &ReferenceSet,
    k: usize,
    seed: u64,
    target: &Target,
    exec: Exec,
) -> Result<AttributionMatrix> {
    check_eg(model, x.ncols(), refs, k)?;
    target.check(x.nrows(), model.n_outputs())?;
    let rows = par::try_map_range(exec, x.nrows(), |i| {
        Ok::<_, Error>(
            eg_terms(model, x.row(i), refs, k, seed, i, target.class_of(i))?
                .mean_axis(Axis(0))
                .unwrap(),
        )
    })?;
    Ok(AttributionMatrix {
        values: stack_rows(&rows, x.ncols()),
        method: Method::ExpectedGradients,
        meta: AttributionMeta { k: Some(k), seed: Some(seed), ..Default::default() },
    })
}

/// Expected gradients for a training batch, recorded on the parameter tape.
///
/// The batch doubles as its own reference set: for shift `s = 1..=k`, row `j`
/// uses row `(j + s) mod b` as its reference, with a fresh `α` per
/// (row, shift). The result is `b × p` and differentiable in the parameters.
pub fn expected_gradients_train_batch<'t>(
    model: &Model,
    params: &Params<'t>,
    batch: ArrayView2<'_, f64>,
    k: usize,
    rng: &mut Rng,
    classes: Option<&[usize]>,
) -> Result<Var<'t>> {
    let (b, p) = batch.dim();
    if k == 0 || k >= b {
        return Err(Error::InvalidK { k, batch: b });
    }
    check_features(model, p)?;
    let tape = params.weights[0].tape();
    let rows = k * b;
    let mut diffs = Array2::<f64>::zeros((rows, p));
    let mut points = Array2::<f64>::zeros((rows, p));
    for s in 1..=k {
        for j in 0..b {
            let alpha: f64 = rng.random();
            let reference = batch.row((j + s) % b);
            let r = (s - 1) * b + j;
            for i in 0..p {
                let d = batch[[j, i]] - reference[i];
                diffs[[r, i]] = d;
                points[[r, i]] = reference[i] + alpha * d;
            }
        }
    }
    let stacked_classes: Vec<usize> = match classes {
        Some(c) => (0..rows).map(|r| c[r % b]).collect(),
        None => vec![0; rows],
    };
    let z = tape.leaf(points);
    let g = input_gradients_on_tape(model, params, z, &stacked_classes)?;
    let terms = g.mul_const(Arc::new(diffs));
    if k == 1 {
        return Ok(terms);
    }
    let mut avg = Array2::<f64>::zeros((b, rows));
    for j in 0..b {
        for s in 0..k {
            avg[[j, s * b + j]] = 1.0 / k as f64;
        }
    }
    Ok(tape.leaf(avg).matmul(terms))
}

/// Input gradients of a training batch, recorded on the parameter tape.
pub fn gradients_train_batch<'t>(
    model: &Model,
    params: &Params<'t>,
    batch: ArrayView2<'_, f64>,
    classes: Option<&[usize]>,
) -> Result<Var<'t>> {
    check_features(model, batch.ncols())?;
    let tape = params.weights[0].tape();
    let cls = classes.map(<[usize]>::to_vec).unwrap_or_else(|| vec![0; batch.nrows()]);
    input_gradients_on_tape(model, params, tape.leaf(batch.to_owned()), &cls)
}

/// `φ̄_i = (1/n) Σ_ℓ |φ_i^ℓ|`.
pub fn global_mean_abs(phi: &AttributionMatrix) -> Result<GlobalAttribution> {
    if phi.values.nrows() == 0 {
        return Err(shape_err("cannot summarise an attribution matrix with no rows"));
    }
    Ok(GlobalAttribution(phi.values.mapv(f64::abs).mean_axis(Axis(0)).unwrap()))
}

/// Tape version of [`global_mean_abs`]: `n × p` to `1 × p`.
pub fn global_mean_abs_var(phi: Var<'_>) -> Var<'_> {
    let n = phi.shape().0;
    phi.abs().sum_rows() * (1.0 / n as f64)
}

/// Standard-normal attributions, used as the uninformative control.
pub fn random_attrib(shape: (usize, usize), seed: u64) -> AttributionMatrix {
    let mut rng = rng::stream(seed, &[TAG_RANDOM_ATTR]);
    AttributionMatrix {
        values: Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal)),
        method: Method::Random,
        meta: AttributionMeta { seed: Some(seed), ..Default::default() },
    }
}

/// Mean absolute difference between expected-gradients attributions computed
/// with `k` draws and with `baseline_k` draws, for each `k` in `k_grid`.
/// Estimates at different `k` share a random stream, so each is a prefix of
/// the baseline's draws.
pub fn convergence_diagnostic<M: Explain + ?Sized>(
    model: &M,
    x: ArrayView2<'_, f64>,
    refs: &ReferenceSet,
    k_grid: &[usize],
    baseline_k: usize,
    seed: u64,
    exec: Exec,
) -> Result<Vec<f64>> {
    let max_k = k_grid.iter().copied().max().unwrap_or(0);
    if baseline_k < max_k {
        return Err(Error::InvalidSpec(format!("baseline k {baseline_k} is below grid maximum {max_k}")));
    }
    if k_grid.contains(&0) {
        return Err(Error::InvalidSpec("k must be at least 1".into()));
    }
    check_eg(model, x.ncols(), refs, baseline_k)?;
    let per_row = par::try_map_range(exec, x.nrows(), |i| {
        let terms = eg_terms(model, x.row(i), refs, baseline_k, seed, i, 0)?;
        let mut prefix = Array2::<f64>::zeros(terms.dim());
        let mut acc = Array1::<f64>::zeros(terms.ncols());
        for (j, t) in terms.rows().into_iter().enumerate() {
            acc += &t;
            prefix.row_mut(j).assign(&acc);
        }
        let full = prefix.row(baseline_k - 1).mapv(|v| v / baseline_k as f64);
        Ok::<_, Error>(
            k_grid
                .iter()
                .map(|&k| {
                    let est = prefix.row(k - 1).mapv(|v| v / k as f64);
                    (&est - &full).mapv(f64::abs).sum()
                })
                .collect::<Vec<f64>>(),
        )
    })?;
    let denom = (x.nrows() * x.ncols()) as f64;
    Ok((0..k_grid.len()).map(|g| per_row.iter().map(|r| r[g]).sum::<f64>() / denom).collect())
}

impl AttributionMatrix {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(w, "sample_index")?;
        for i in 0..self.values.ncols() {
            write!(w, ",feature_{i}")?;
        }
        writeln!(w)?;
        for (l, row) in self.values.rows().into_iter().enumerate() {
            write!(w, "{l}")?;
            for v in row {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Writes one `h × w` CSV per sample into `dir` as `sample_<ℓ>.csv`.
    pub fn write_grid_csvs(&self, dir: &Path, grid: (usize, usize)) -> Result<()> {
        let (h, wd) = grid;
        if h * wd != self.values.ncols() {
            return Err(shape_err(format!("grid {h}x{wd} does not match {} features", self.values.ncols())));
        }
        std::fs::create_dir_all(dir)?;
        for (l, row) in self.values.rows().into_iter().enumerate() {
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("sample_{l}.csv")))?);
            for r in 0..h {
                let line: Vec<String> = (0..wd).map(|c| row[r * wd + c].to_string()).collect();
                writeln!(f, "{}", line.join(","))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_model, DenseLayer, InputShape, ModelSpec};
    use ndarray::array;

    pub(crate) fn linear_model(w: &[f64]) -> Model {
        Model {
            layers: vec![DenseLayer {
                weights: Array2::from_shape_vec((1, w.len()), w.to_vec()).unwrap(),
                biases: array![0.25],
                activation: Activation::Identity,
            }],
            dropout: vec![0.0],
            input_shape: InputShape::Flat(w.len()),
        }
    }

    #[test]
    fn gradients_of_linear_model() {
        let m = linear_model(&[3.0, -2.0]);
        let x = array![[1.0, 2.0], [-4.0, 0.5], [0.0, 0.0]];
        let a = grad_attrib(&m, x.view(), &Target::First).unwrap();
        for row in a.values.rows() {
            assert_eq!(row.to_vec(), vec![3.0, -2.0]);
        }
    }

    #[test]
    fn disconnected_feature_gets_zero_gradient() {
        let mut m = init_model(&ModelSpec::mlp(InputShape::Flat(3), &[6], Activation::Identity), 4).unwrap();
        m.layers[0].weights.column_mut(1).fill(0.0);
        let x = array![[0.3, 2.0, -1.0], [1.0, -1.0, 0.5]];
        let a = grad_attrib(&m, x.view(), &Target::First).unwrap();
        assert!(a.values.column(1).iter().all(|&v| v == 0.0));
    }

    fn square() -> FnModel<impl for<'t> Fn(Var<'t>) -> Result<Var<'t>> + Sync> {
        FnModel::new(1, 1, |x: Var<'_>| Ok(x.square()))
    }

    #[test]
    fn quadratic_examples() {
        let f = square();
        let g = grad_attrib(&f, array![[2.0]].view(), &Target::First).unwrap();
        assert_eq!(g.values[[0, 0]], 4.0);
        let ig = integrated_gradients(&f, array![2.0].view(), array![0.0].view(), 1000, 0).unwrap();
        assert!((ig[0] - 4.0).abs() < 1e-9, "{ig}");
        let refs = ReferenceSet::new(array![[0.0]]).unwrap();
        let eg = expected_gradients(&f, array![2.0].view(), &refs, 20_000, 7).unwrap();
        assert!((eg[0] - 4.0).abs() < 0.05, "{eg}");
    }

    #[test]
    fn integrated_gradients_linear_is_exact() {
        let m = linear_model(&[2.0, -1.0, 0.5]);
        let x = array![1.0, 3.0, -2.0];
        let base = array![0.5, -1.0, 1.0];
        for steps in [1, 7, 50] {
            let ig = integrated_gradients(&m, x.view(), base.view(), steps, 0).unwrap();
            assert_eq!(ig.to_vec(), vec![2.0 * 0.5, -4.0, 0.5 * -3.0]);
        }
    }

    #[test]
    fn integrated_gradients_zero_path_and_errors() {
        let m = linear_model(&[2.0, -1.0]);
        let x = array![1.0, 3.0];
        let ig = integrated_gradients(&m, x.view(), x.view(), 16, 0).unwrap();
        assert!(ig.iter().all(|&v| v == 0.0));
        assert!(matches!(
            integrated_gradients(&m, x.view(), array![1.0].view(), 4, 0),
            Err(Error::Shape(_))
        ));
        assert!(integrated_gradients(&m, x.view(), x.view(), 0, 0).is_err());
    }

    #[test]
    fn expected_gradients_linear_model() {
        let m = linear_model(&[2.0, -1.0]);
        // References symmetric around the origin: mean exactly (0, 0).
        let refs = ReferenceSet::new(array![[1.0, -2.0], [-1.0, 2.0], [0.5, 0.5], [-0.5, -0.5]]).unwrap();
        let x = array![1.0, 1.0];
        let eg = expected_gradients(&m, x.view(), &refs, 20_000, 3).unwrap();
        assert!((eg[0] - 2.0).abs() < 0.03, "{eg}");
        assert!((eg[1] + 1.0).abs() < 0.03, "{eg}");
    }

    #[test]
    fn expected_gradients_single_reference_equal_to_input() {
        let m = init_model(&ModelSpec::mlp(InputShape::Flat(3), &[5], Activation::Identity), 1).unwrap();
        let x = array![0.2, -0.7, 1.1];
        let refs = ReferenceSet::new(x.clone().insert_axis(Axis(0))).unwrap();
        let eg = expected_gradients(&m, x.view(), &refs, 10, 0).unwrap();
        assert!(eg.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn expected_gradients_errors() {
        assert!(matches!(ReferenceSet::new(Array2::zeros((0, 2))), Err(Error::EmptyReferences)));
        let m = linear_model(&[1.0, 1.0]);
        let refs = ReferenceSet::new(Array2::zeros((2, 2))).unwrap();
        assert!(expected_gradients(&m, array![1.0, 1.0].view(), &refs, 0, 0).is_err());
    }

    #[test]
    fn expected_gradients_deterministic_and_exec_independent() {
        let m = init_model(&ModelSpec::mlp(InputShape::Flat(4), &[8], Activation::Identity), 2).unwrap();
        let x = Array2::from_shape_fn((6, 4), |(i, j)| ((i * 3 + j) as f64 * 0.7).cos());
        let refs = ReferenceSet::new(Array2::from_shape_fn((9, 4), |(i, j)| ((i + j) as f64 * 0.4).sin())).unwrap();
        let a = expected_gradients_matrix(&m, x.view(), &refs, 25, 5, &Target::First, Exec::Sequential).unwrap();
        let b = expected_gradients_matrix(&m, x.view(), &refs, 25, 5, &Target::First, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        let c = expected_gradients_matrix(&m, x.view(), &refs, 25, 6, &Target::First, Exec::Sequential).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn train_batch_cyclic_references() {
        let m = linear_model(&[2.0, -3.0]);
        let tape = Tape::new();
        let params = m.bind(&tape);
        let batch = array![[1.0, 0.0], [0.0, 2.0]];
        let mut r = rng::stream(0, &[]);
        let phi = expected_gradients_train_batch(&m, &params, batch.view(), 1, &mut r, None).unwrap();
        // Row 0 uses row 1 as reference and vice versa.
        assert_eq!(phi.value(), array![[2.0, 6.0], [-2.0, -6.0]]);
    }

    #[test]
    fn train_batch_identical_rows_and_invalid_k() {
        let m = init_model(&ModelSpec::mlp(InputShape::Flat(3), &[4], Activation::Identity), 0).unwrap();
        let tape = Tape::new();
        let params = m.bind(&tape);
        let batch = Array2::from_elem((4, 3), 0.7);
        let mut r = rng::stream(0, &[]);
        let phi = expected_gradients_train_batch(&m, &params, batch.view(), 2, &mut r, None).unwrap();
        assert!(phi.value().iter().all(|&v| v == 0.0));
        assert!(matches!(
            expected_gradients_train_batch(&m, &params, batch.view(), 4, &mut r, None),
            Err(Error::InvalidK { k: 4, batch: 4 })
        ));
    }

    #[test]
    fn train_batch_linear_uses_mean_of_other_rows() {
        let w = [1.5, -0.5, 2.0];
        let m = linear_model(&w);
        let tape = Tape::new();
        let params = m.bind(&tape);
        let batch = array![[1.0, 2.0, 3.0], [-1.0, 0.0, 4.0], [2.0, 2.0, -2.0], [0.5, -3.0, 1.0]];
        let mut r = rng::stream(9, &[]);
        let phi = expected_gradients_train_batch(&m, &params, batch.view(), 3, &mut r, None).unwrap().value();
        for j in 0..4 {
            for i in 0..3 {
                let others: f64 = (0..4).filter(|&l| l != j).map(|l| batch[[l, i]]).sum::<f64>() / 3.0;
                let want = w[i] * (batch[[j, i]] - others);
                assert!((phi[[j, i]] - want).abs() < 1e-12, "({j},{i}) {} vs {want}", phi[[j, i]]);
            }
        }
    }

    #[test]
    fn global_mean_abs_examples() {
        let phi = AttributionMatrix {
            values: array![[1.0, -1.0], [3.0, 1.0]],
            method: Method::Random,
            meta: AttributionMeta::default(),
        };
        assert_eq!(global_mean_abs(&phi).unwrap().0.to_vec(), vec![2.0, 1.0]);
        let zero = AttributionMatrix { values: Array2::zeros((3, 2)), ..phi.clone() };
        assert_eq!(global_mean_abs(&zero).unwrap().0.to_vec(), vec![0.0, 0.0]);
        let one = AttributionMatrix { values: array![[-2.5, 4.0]], ..phi };
        assert_eq!(global_mean_abs(&one).unwrap().0.to_vec(), vec![2.5, 4.0]);

        let tape = Tape::new();
        let v = global_mean_abs_var(tape.leaf(array![[1.0, -1.0], [3.0, 1.0]]));
        assert_eq!(v.value(), array![[2.0, 1.0]]);
    }

    #[test]
    fn random_attrib_seeding_and_mean() {
        assert_eq!(random_attrib((4, 3), 1), random_attrib((4, 3), 1));
        assert_ne!(random_attrib((4, 3), 1).values, random_attrib((4, 3), 2).values);
        let big = random_attrib((1000, 100), 3);
        assert!(big.values.mean().unwrap().abs() < 1e-2);
    }

    #[test]
    fn convergence_diagnostic_examples() {
        let m = init_model(&ModelSpec::mlp(InputShape::Flat(3), &[6], Activation::Identity), 8).unwrap();
        let x = Array2::from_shape_fn((5, 3), |(i, j)| ((2 * i + j) as f64 * 0.3).sin());
        let refs = ReferenceSet::new(Array2::from_shape_fn((12, 3), |(i, j)| ((i * j) as f64 * 0.2).cos())).unwrap();
        let d = convergence_diagnostic(&m, x.view(), &refs, &[40], 40, 1, Exec::Sequential).unwrap();
        assert_eq!(d, vec![0.0]);
        assert!(convergence_diagnostic(&m, x.view(), &refs, &[50], 40, 1, Exec::Sequential).is_err());

        // Linear model with a single reference: every draw has the same
        // attribution, so every k agrees with the baseline.
        let lin = linear_model(&[1.0, -2.0, 0.5]);
        let one = ReferenceSet::new(array![[0.1, 0.2, 0.3]]).unwrap();
        let d = convergence_diagnostic(&lin, x.view(), &one, &[1, 5, 10], 30, 4, Exec::Sequential).unwrap();
        assert!(d.iter().all(|&v| v < 1e-14), "{d:?}");
    }

    #[test]
    fn csv_export_header() {
        let dir = tempfile::tempdir().unwrap();
        let phi = random_attrib((2, 4), 0);
        let path = dir.path().join("a.csv");
        phi.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("sample_index,feature_0,feature_1,feature_2,feature_3\n0,"));
        assert_eq!(text.lines().count(), 3);
        phi.write_grid_csvs(&dir.path().join("grid"), (2, 2)).unwrap();
        let g = std::fs::read_to_string(dir.path().join("grid/sample_1.csv")).unwrap();
        assert_eq!(g.lines().count(), 2);
        assert!(phi.write_grid_csvs(dir.path(), (3, 3)).is_err());
    }
}
