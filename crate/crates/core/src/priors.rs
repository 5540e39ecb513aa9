//! Penalties on attributions and weights, and the composed training objective.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::attrib::{self, global_mean_abs_var};
use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};
use crate::nn::{per_sample_loss, Activation, LossSpec, Model, Params};
use crate::rng::Rng;

/// Weighted undirected feature graph with its Laplacian `D - W`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGraph {
    adjacency: Array2<f64>,
    laplacian: Array2<f64>,
}

impl FeatureGraph {
    pub fn new(adjacency: Array2<f64>) -> Result<Self> {
        let (p, q) = adjacency.dim();
        if p != q {
            return Err(shape_err(format!("adjacency must be square, got {p}x{q}")));
        }
        for i in 0..p {
            if adjacency[[i, i]] != 0.0 {
                return Err(Error::InvalidSpec(format!("adjacency diagonal entry {i} is nonzero")));
            }
            for j in 0..p {
                let w = adjacency[[i, j]];
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::InvalidSpec(format!("edge weight ({i},{j}) = {w} is not a nonnegative number")));
                }
                if (w - adjacency[[j, i]]).abs() > 1e-12 {
                    return Err(Error::InvalidSpec(format!("adjacency is not symmetric at ({i},{j})")));
                }
            }
        }
        let mut laplacian = -&adjacency;
        for (i, d) in adjacency.sum_axis(Axis(1)).iter().enumerate() {
            laplacian[[i, i]] = *d;
        }
        Ok(Self { adjacency, laplacian })
    }

    /// Builds a graph from undirected edges `(i, j, weight)`, each listed once.
    pub fn from_edges(p: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut w = Array2::<f64>::zeros((p, p));
        for &(i, j, v) in edges {
            if i >= p || j >= p {
                return Err(shape_err(format!("edge ({i},{j}) outside {p} nodes")));
            }
            if i == j {
                return Err(Error::InvalidSpec(format!("self loop at node {i}")));
            }
            w[[i, j]] = v;
            w[[j, i]] = v;
        }
        Self::new(w)
    }

    pub fn adjacency(&self) -> &Array2<f64> {
        &self.adjacency
    }

    pub fn laplacian(&self) -> &Array2<f64> {
        &self.laplacian
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.nrows()
    }

    /// Nonzero edges `(i, j, w)` with `i < j`, in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let p = self.n_nodes();
        let mut out = Vec::new();
        for i in 0..p {
            for j in i + 1..p {
                let w = self.adjacency[[i, j]];
                if w != 0.0 {
                    out.push((i, j, w));
                }
            }
        }
        out
    }

    /// `vᵀ L v`.
    pub fn quadratic_form(&self, v: &Array1<f64>) -> f64 {
        v.dot(&self.laplacian.dot(v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    PixelTv,
    Graph,
    SparseGini,
    MixedL1Gini,
    RossGradMask,
    L1Attrib,
    L2Attrib,
    GiniGradients,
    L1Gradients,
    L1All,
    L1First,
    L2All,
    L2First,
    SglAll,
    SglFirst,
    GraphWeights,
}

impl PriorKind {
    pub fn weight_penalty(self) -> Option<WeightPenalty> {
        Some(match self {
            PriorKind::L1All => WeightPenalty::L1All,
            PriorKind::L1First => WeightPenalty::L1First,
            PriorKind::L2All => WeightPenalty::L2All,
            PriorKind::L2First => WeightPenalty::L2First,
            PriorKind::SglAll => WeightPenalty::SglAll,
            PriorKind::SglFirst => WeightPenalty::SglFirst,
            PriorKind::GraphWeights => WeightPenalty::GraphWeights,
            _ => return None,
        })
    }

    /// Whether the penalty is a function of feature attributions.
    pub fn uses_attributions(self) -> bool {
        self.weight_penalty().is_none() && self != PriorKind::RossGradMask
    }

    pub fn needs_graph(self) -> bool {
        matches!(self, PriorKind::Graph | PriorKind::GraphWeights)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttributionSource {
    #[default]
    ExpectedGradients,
    Gradients,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub kind: PriorKind,
    #[serde(alias = "lambda")]
    pub strength: f64,
    #[serde(default)]
    pub source: AttributionSource,
    /// Divide each attribution map by its standard deviation before TV.
    #[serde(default = "default_true")]
    pub normalize: bool,
    /// Penalised entries for the gradient-mask prior: one row per training
    /// sample, or a single row shared by all samples.
    #[serde(skip)]
    pub mask: Option<Array2<f64>>,
    #[serde(skip)]
    pub graph: Option<FeatureGraph>,
}

impl PriorSpec {
    pub fn new(kind: PriorKind, strength: f64) -> Self {
        Self { kind, strength, source: AttributionSource::default(), normalize: true, mask: None, graph: None }
    }

    pub fn with_graph(mut self, graph: FeatureGraph) -> Self {
        self.graph = Some(graph);
        self
    }

    pub fn with_mask(mut self, mask: Array2<f64>) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn with_source(mut self, source: AttributionSource) -> Self {
        self.source = source;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.strength.is_finite() || self.strength < 0.0 {
            return Err(Error::InvalidSpec(format!("prior strength {} must be nonnegative", self.strength)));
        }
        if self.kind.needs_graph() && self.graph.is_none() {
            return Err(Error::InvalidSpec(format!("{:?} prior requires a feature graph", self.kind)));
        }
        if self.kind == PriorKind::RossGradMask && self.mask.is_none() {
            return Err(Error::InvalidSpec("gradient-mask prior requires a mask".into()));
        }
        Ok(())
    }

    /// The attribution method the penalty is evaluated on.
    pub fn effective_source(&self) -> AttributionSource {
        match self.kind {
            PriorKind::GiniGradients | PriorKind::L1Gradients => AttributionSource::Gradients,
            _ => self.source,
        }
    }
}

/// Anisotropic total variation summed over samples. Each row of `phi` is an
/// `h × w` map stored row-major.
pub fn tv_penalty<'t>(phi: Var<'t>, grid: (usize, usize), normalize: bool) -> Result<Var<'t>> {
    let p = phi.shape().1;
    let (h, w) = grid;
    if h * w != p || h == 0 || w == 0 {
        return Err(shape_err(format!("{p} attributions do not form a {h}x{w} grid")));
    }
    let phi = if normalize {
        let mean = phi.sum_cols() * (1.0 / p as f64);
        let centred = phi - mean.broadcast_cols(p);
        let std = (centred.square().sum_cols() * (1.0 / p as f64)).sqrt();
        phi / (std + 1e-8).broadcast_cols(p)
    } else {
        phi
    };
    let edges = (h - 1) * w + h * (w - 1);
    let mut diff = Array2::<f64>::zeros((p, edges));
    let mut e = 0;
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if c + 1 < w {
                diff[[i + 1, e]] = 1.0;
                diff[[i, e]] = -1.0;
                e += 1;
            }
            if r + 1 < h {
                diff[[i + w, e]] = 1.0;
                diff[[i, e]] = -1.0;
                e += 1;
            }
        }
    }
    Ok(phi.matmul(phi.tape().leaf(diff)).abs().sum())
}

/// Laplacian quadratic form `φ̄ᵀ L φ̄` of a `1 × p` global attribution.
pub fn graph_penalty<'t>(phibar: Var<'t>, graph: &FeatureGraph) -> Result<Var<'t>> {
    let (r, p) = phibar.shape();
    if r != 1 || p != graph.n_nodes() {
        return Err(shape_err(format!("global attribution {r}x{p} does not match a {}-node graph", graph.n_nodes())));
    }
    let l = phibar.tape().leaf(graph.laplacian.clone());
    Ok(phibar.matmul(l).matmul(phibar.t()))
}

/// `-2 G(φ̄)` for a nonnegative `1 × p` global attribution; 0 when `φ̄ = 0`.
pub fn gini_penalty(phibar: Var<'_>) -> Result<Var<'_>> {
    let (r, p) = phibar.shape();
    if r != 1 || p == 0 {
        return Err(shape_err(format!("global attribution must be a nonempty row, got {r}x{p}")));
    }
    let v = phibar.value();
    if v.iter().any(|&x| x < 0.0 || x.is_nan()) {
        return Err(Error::InvalidAttribution("global attributions must be nonnegative".into()));
    }
    if v.sum() == 0.0 {
        return Ok(phibar.sum() * 0.0);
    }
    // Sorted form Σ_i Σ_j |φ_i - φ_j| = 2 Σ_r (2r - p - 1) φ_(r), summed in
    // ascending order so the value does not depend on feature order.
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| v[[0, a]].total_cmp(&v[[0, b]]));
    let mut perm = Array2::<f64>::zeros((p, p));
    for (r, &i) in order.iter().enumerate() {
        perm[[i, r]] = 1.0;
    }
    let sorted = phibar.matmul(phibar.tape().leaf(perm));
    let ranks = Array2::from_shape_fn((1, p), |(_, r)| 2.0 * (2.0 * (r + 1) as f64 - p as f64 - 1.0));
    let pairwise = sorted.mul_const(Arc::new(ranks)).sum();
    Ok(-(pairwise / sorted.sum()) * (1.0 / p as f64))
}

/// Squared Frobenius norm of `A ⊙ ∂L/∂X`, where `L` is the summed
/// per-sample loss of the model on `x`.
pub fn ross_grad_mask_penalty<'t>(
    model: &Model,
    params: &Params<'t>,
    x: ArrayView2<'_, f64>,
    y: &Array1<f64>,
    loss: LossSpec,
    mask: ArrayView2<'_, f64>,
) -> Result<Var<'t>> {
    if mask.dim() != x.dim() {
        return Err(shape_err(format!("mask {:?} does not match inputs {:?}", mask.dim(), x.dim())));
    }
    let tape = params.weights[0].tape();
    let z = tape.leaf(x.to_owned());
    let out = model.forward(params, z, None)?;
    let l = per_sample_loss(&out, y, loss)?.sum();
    let g = tape.var(tape.grad(l.id(), &[z.id()])?[0])?;
    Ok(g.mul_const(Arc::new(mask.to_owned())).square().sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightPenalty {
    L1All,
    L1First,
    L2All,
    L2First,
    SglAll,
    SglFirst,
    GraphWeights,
}

fn sgl_layer<'t>(w: Var<'t>, b: Var<'t>) -> Var<'t> {
    w.abs().sum() + w.square().sum_rows().sqrt().sum() + b.abs().sum()
}

/// Penalty on model weights. Biases enter only the sparse-group-lasso terms.
pub fn weight_penalty<'t>(
    model: &Model,
    params: &Params<'t>,
    kind: WeightPenalty,
    graph: Option<&FeatureGraph>,
) -> Result<Var<'t>> {
    let ws = &params.weights;
    if ws.is_empty() {
        return Err(Error::InvalidSpec("weight penalty on a model with no layers".into()));
    }
    let first = &ws[..1];
    let sum = |vs: &[Var<'t>], f: &dyn Fn(Var<'t>) -> Var<'t>| {
        vs.iter().map(|&v| f(v)).reduce(|a, b| a + b).expect("nonempty")
    };
    Ok(match kind {
        WeightPenalty::L1All => sum(ws, &|w| w.abs().sum()),
        WeightPenalty::L1First => sum(first, &|w| w.abs().sum()),
        WeightPenalty::L2All => sum(ws, &|w| w.square().sum()),
        WeightPenalty::L2First => sum(first, &|w| w.square().sum()),
        WeightPenalty::SglAll => ws
            .iter()
            .zip(&params.biases)
            .map(|(&w, &b)| sgl_layer(w, b))
            .reduce(|a, b| a + b)
            .expect("nonempty"),
        WeightPenalty::SglFirst => sgl_layer(ws[0], params.biases[0]),
        WeightPenalty::GraphWeights => {
            let linear = model.layers.len() == 1
                && model.n_outputs() == 1
                && matches!(model.head(), Activation::Identity | Activation::Sigmoid);
            if !linear {
                return Err(Error::InvalidSpec("graph weight penalty needs a single-layer linear model".into()));
            }
            let graph = graph.ok_or_else(|| Error::InvalidSpec("graph weight penalty requires a graph".into()))?;
            let w = ws[0];
            if w.shape().1 != graph.n_nodes() {
                return Err(shape_err(format!("{} weights for a {}-node graph", w.shape().1, graph.n_nodes())));
            }
            let l = w.tape().leaf(graph.laplacian.clone());
            w.matmul(l).matmul(w.t())
        }
    })
}

/// `loss + Σ λ_i · penalty_i`. Terms with `λ = 0` are left out entirely.
pub fn compose_objective<'t>(loss: Var<'t>, terms: &[(f64, Var<'t>)]) -> Result<Var<'t>> {
    let mut total = loss;
    for &(lambda, penalty) in terms {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::InvalidSpec(format!("prior strength {lambda} must be nonnegative")));
        }
        if lambda != 0.0 {
            total = total + penalty * lambda;
        }
    }
    Ok(total)
}

/// Penalty of an attribution-based prior on an `n × p` attribution node.
pub fn attribution_penalty<'t>(spec: &PriorSpec, phi: Var<'t>, grid: Option<(usize, usize)>) -> Result<Var<'t>> {
    let n = phi.shape().0 as f64;
    match spec.kind {
        PriorKind::PixelTv => {
            let grid = grid.ok_or_else(|| shape_err("total variation needs grid-shaped inputs"))?;
            tv_penalty(phi, grid, spec.normalize)
        }
        PriorKind::Graph => {
            let graph = spec.graph.as_ref().ok_or_else(|| Error::InvalidSpec("graph prior requires a graph".into()))?;
            graph_penalty(global_mean_abs_var(phi), graph)
        }
        PriorKind::SparseGini | PriorKind::GiniGradients => gini_penalty(global_mean_abs_var(phi)),
        PriorKind::MixedL1Gini => Ok(global_mean_abs_var(phi).sum() + gini_penalty(global_mean_abs_var(phi))?),
        PriorKind::L1Attrib | PriorKind::L1Gradients => Ok(global_mean_abs_var(phi).sum()),
        PriorKind::L2Attrib => Ok(phi.square().sum() * (1.0 / n)),
        other => Err(Error::InvalidSpec(format!("{other:?} is not an attribution prior"))),
    }
}

/// Everything a prior may need about the current minibatch.
pub struct PriorContext<'a, 't> {
    pub model: &'a Model,
    pub params: &'a Params<'t>,
    pub x: ArrayView2<'a, f64>,
    pub y: &'a Array1<f64>,
    /// Dataset row index of each batch row, used to pick mask rows.
    pub rows: &'a [usize],
    pub loss: LossSpec,
    pub k: usize,
    /// Explained class per batch row for multi-output models.
    pub classes: Option<&'a [usize]>,
}

/// Evaluates one prior on a minibatch. Attributions are taken in eval mode.
pub fn prior_penalty<'t>(spec: &PriorSpec, ctx: &PriorContext<'_, 't>, rng: &mut Rng) -> Result<Var<'t>> {
    spec.validate()?;
    if let Some(kind) = spec.kind.weight_penalty() {
        return weight_penalty(ctx.model, ctx.params, kind, spec.graph.as_ref());
    }
    if spec.kind == PriorKind::RossGradMask {
        let mask = spec.mask.as_ref().expect("validated");
        let batch_mask = if mask.nrows() == 1 {
            mask.broadcast(ctx.x.dim())
                .ok_or_else(|| shape_err("mask row does not match feature count"))?
                .to_owned()
        } else {
            if ctx.rows.iter().any(|&r| r >= mask.nrows()) {
                return Err(shape_err("mask has fewer rows than the dataset"));
            }
            mask.select(Axis(0), ctx.rows)
        };
        return ross_grad_mask_penalty(ctx.model, ctx.params, ctx.x, ctx.y, ctx.loss, batch_mask.view());
    }
    let phi = match spec.effective_source() {
        AttributionSource::ExpectedGradients => {
            attrib::expected_gradients_train_batch(ctx.model, ctx.params, ctx.x, ctx.k, rng, ctx.classes)?
        }
        AttributionSource::Gradients => attrib::gradients_train_batch(ctx.model, ctx.params, ctx.x, ctx.classes)?,
    };
    attribution_penalty(spec, phi, ctx.model.input_shape.grid())
}

/// Value of [`tv_penalty`] for an attribution matrix.
pub fn tv_value(phi: &Array2<f64>, grid: (usize, usize), normalize: bool) -> Result<f64> {
    let tape = crate::autodiff::Tape::new();
    Ok(tv_penalty(tape.leaf(phi.clone()), grid, normalize)?.item())
}

/// Value of [`gini_penalty`] for a global attribution vector.
pub fn gini_penalty_value(phibar: &Array1<f64>) -> Result<f64> {
    let tape = crate::autodiff::Tape::new();
    Ok(gini_penalty(tape.leaf(phibar.clone().insert_axis(Axis(0))))?.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradient_check, Tape};
    use crate::nn::{init_model, DenseLayer, InputShape, LayerSpec, ModelSpec};
    use crate::rng;
    use ndarray::array;
    use proptest::prelude::*;

    fn row(v: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn graph_invariants_and_errors() {
        let g = FeatureGraph::from_edges(3, &[(0, 1, 1.0), (1, 2, 2.5)]).unwrap();
        for s in g.laplacian().sum_axis(Axis(1)) {
            assert!(s.abs() < 1e-10);
        }
        assert_eq!(g.edges(), vec![(0, 1, 1.0), (1, 2, 2.5)]);
        assert!(FeatureGraph::new(array![[0.0, 1.0], [2.0, 0.0]]).is_err());
        assert!(FeatureGraph::new(array![[1.0, 0.0], [0.0, 0.0]]).is_err());
        assert!(FeatureGraph::new(array![[0.0, -1.0], [-1.0, 0.0]]).is_err());
        assert!(FeatureGraph::from_edges(2, &[(0, 2, 1.0)]).is_err());
    }

    #[test]
    fn tv_examples() {
        let tape = Tape::new();
        let c = tv_penalty(tape.leaf(row(&[1.0, 1.0, 1.0, 1.0])), (2, 2), false).unwrap();
        assert_eq!(c.item(), 0.0);
        let m = tv_penalty(tape.leaf(row(&[0.0, 1.0, 0.0, 1.0])), (2, 2), false).unwrap();
        assert_eq!(m.item(), 2.0);
        // Unit-std map: the floor is the only difference after scaling.
        let a = tv_value(&row(&[0.0, 1.0, 0.0, 1.0]), (2, 2), true).unwrap() * (0.5 + 1e-8) / 0.5;
        let b = tv_value(&row(&[0.0, 10.0, 0.0, 10.0]), (2, 2), true).unwrap() * (5.0 + 1e-8) / 5.0;
        assert!((a - b).abs() <= 1e-9 * a.abs());
        assert!((a - 4.0).abs() < 1e-12);
        assert!(matches!(tv_value(&row(&[1.0, 2.0, 3.0]), (2, 2), false), Err(Error::Shape(_))));
    }

    #[test]
    fn tv_sums_over_samples() {
        let phi = array![[0.0, 1.0, 0.0, 1.0], [0.0, 0.0, 3.0, 3.0]];
        assert_eq!(tv_value(&phi, (2, 2), false).unwrap(), 2.0 + 6.0);
    }

    #[test]
    fn graph_examples() {
        let tape = Tape::new();
        let two = FeatureGraph::from_edges(2, &[(0, 1, 1.0)]).unwrap();
        assert_eq!(graph_penalty(tape.leaf(row(&[3.0, 1.0])), &two).unwrap().item(), 4.0);
        let path = FeatureGraph::from_edges(3, &[(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        assert_eq!(graph_penalty(tape.leaf(row(&[0.0, 1.0, 3.0])), &path).unwrap().item(), 5.0);
        assert_eq!(graph_penalty(tape.leaf(row(&[2.0, 2.0, 2.0])), &path).unwrap().item(), 0.0);
        assert!(matches!(graph_penalty(tape.leaf(row(&[1.0, 2.0])), &path), Err(Error::Shape(_))));
    }

    #[test]
    fn gini_examples() {
        assert_eq!(gini_penalty_value(&array![1.0, 0.0, 0.0, 0.0]).unwrap(), -1.5);
        assert_eq!(gini_penalty_value(&array![2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(gini_penalty_value(&array![3.0, 1.0]).unwrap(), -0.5);
        assert_eq!(gini_penalty_value(&array![0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(gini_penalty_value(&array![1.0, -1.0]), Err(Error::InvalidAttribution(_))));
    }

    #[test]
    fn gini_extremes_on_simplex_grid() {
        let res = 100;
        let mut best = (f64::INFINITY, (0, 0));
        let mut worst = (f64::NEG_INFINITY, (0, 0));
        for a in 0..=res {
            for b in 0..=res - a {
                let c = res - a - b;
                let v = array![a as f64, b as f64, c as f64] / res as f64;
                let g = gini_penalty_value(&v).unwrap();
                if g < best.0 - 1e-12 {
                    best = (g, (a, b));
                }
                if g > worst.0 + 1e-12 {
                    worst = (g, (a, b));
                }
            }
        }
        assert!((best.0 + 2.0 * 2.0 / 3.0).abs() < 1e-12);
        assert!([(res, 0), (0, res), (0, 0)].contains(&best.1));
        // The grid misses the exact centre, where the penalty is 0; the grid
        // maximiser is the point closest to it.
        assert_eq!(gini_penalty_value(&array![1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert!(worst.0 <= 0.0);
        let (a, b) = worst.1;
        assert!((a as i64 - 33).abs() <= 1 && (b as i64 - 33).abs() <= 1, "{:?}", worst.1);
    }

    fn linear(w: &[f64], b: f64) -> Model {
        Model {
            layers: vec![DenseLayer {
                weights: row(w),
                biases: array![b],
                activation: Activation::Identity,
            }],
            dropout: vec![0.0],
            input_shape: InputShape::Flat(w.len()),
        }
    }

    #[test]
    fn ross_examples() {
        let m = linear(&[2.0, -1.0], 0.5);
        let tape = Tape::new();
        let params = m.bind(&tape);
        let x = array![[1.0, 3.0]];
        let y = array![0.0];
        let zero = ross_grad_mask_penalty(&m, &params, x.view(), &y, LossSpec::Mse, Array2::zeros((1, 2)).view()).unwrap();
        assert_eq!(zero.item(), 0.0);
        // f = 2 - 3 + 0.5 = -0.5; ∂(f - y)²/∂x = 2(f - y) w = (-2, 1).
        let full = ross_grad_mask_penalty(&m, &params, x.view(), &y, LossSpec::Mse, array![[1.0, 1.0]].view()).unwrap();
        assert!((full.item() - 5.0).abs() < 1e-12);
        let first = ross_grad_mask_penalty(&m, &params, x.view(), &y, LossSpec::Mse, array![[1.0, 0.0]].view()).unwrap();
        assert!((first.item() - 4.0).abs() < 1e-12);
        assert!(ross_grad_mask_penalty(&m, &params, x.view(), &y, LossSpec::Mse, array![[1.0]].view()).is_err());
    }

    fn two_layer(first: Array2<f64>, b: Array1<f64>) -> Model {
        let out = first.nrows();
        Model {
            layers: vec![
                DenseLayer { weights: first, biases: b, activation: Activation::Relu },
                DenseLayer { weights: Array2::zeros((1, out)), biases: array![0.0], activation: Activation::Identity },
            ],
            dropout: vec![0.0, 0.0],
            input_shape: InputShape::Flat(2),
        }
    }

    #[test]
    fn weight_penalty_examples() {
        let m = two_layer(array![[3.0, 0.0], [4.0, 0.0]], array![0.0, 0.0]);
        let tape = Tape::new();
        let params = m.bind(&tape);
        assert_eq!(weight_penalty(&m, &params, WeightPenalty::SglFirst, None).unwrap().item(), 12.0);
        assert_eq!(weight_penalty(&m, &params, WeightPenalty::L1First, None).unwrap().item(), 7.0);
        assert_eq!(weight_penalty(&m, &params, WeightPenalty::L2All, None).unwrap().item(), 25.0);
        let mb = two_layer(array![[3.0, 0.0], [4.0, 0.0]], array![1.0, -0.5]);
        let params = mb.bind(&tape);
        assert_eq!(weight_penalty(&mb, &params, WeightPenalty::SglFirst, None).unwrap().item(), 13.5);

        let l = linear(&[1.0, 2.0], 0.0);
        let params = l.bind(&tape);
        assert_eq!(weight_penalty(&l, &params, WeightPenalty::L2All, None).unwrap().item(), 5.0);
        let g = FeatureGraph::from_edges(2, &[(0, 1, 1.0)]).unwrap();
        assert_eq!(weight_penalty(&l, &params, WeightPenalty::GraphWeights, Some(&g)).unwrap().item(), 1.0);
        let params = m.bind(&tape);
        assert!(matches!(
            weight_penalty(&m, &params, WeightPenalty::GraphWeights, Some(&g)),
            Err(Error::InvalidSpec(_))
        ));

        let z = two_layer(Array2::zeros((2, 2)), Array1::zeros(2));
        let params = z.bind(&tape);
        for kind in [
            WeightPenalty::L1All,
            WeightPenalty::L1First,
            WeightPenalty::L2All,
            WeightPenalty::L2First,
            WeightPenalty::SglAll,
            WeightPenalty::SglFirst,
        ] {
            assert_eq!(weight_penalty(&z, &params, kind, None).unwrap().item(), 0.0);
        }
        let lz = linear(&[0.0, 0.0], 0.0);
        let params = lz.bind(&tape);
        assert_eq!(weight_penalty(&lz, &params, WeightPenalty::GraphWeights, Some(&g)).unwrap().item(), 0.0);
    }

    #[test]
    fn compose_examples() {
        let tape = Tape::new();
        let loss = tape.scalar(1.0);
        let pen = tape.scalar(2.0);
        assert_eq!(compose_objective(loss, &[]).unwrap().id(), loss.id());
        assert_eq!(compose_objective(loss, &[(0.0, pen)]).unwrap().id(), loss.id());
        assert_eq!(compose_objective(loss, &[(0.5, pen)]).unwrap().item(), 2.0);
        assert!(compose_objective(loss, &[(-1.0, pen)]).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(PriorSpec::new(PriorKind::Graph, 1.0).validate().is_err());
        assert!(PriorSpec::new(PriorKind::RossGradMask, 1.0).validate().is_err());
        assert!(PriorSpec::new(PriorKind::SparseGini, -1.0).validate().is_err());
        assert!(PriorSpec::new(PriorKind::SparseGini, 1.0).validate().is_ok());
        let s: PriorSpec = serde_json::from_str(r#"{"kind":"pixel-tv","lambda":0.1}"#).unwrap();
        assert_eq!(s.kind, PriorKind::PixelTv);
        assert!(s.normalize);
        assert!(serde_json::from_str::<PriorSpec>(r#"{"kind":"graph","strength":1,"typo":1}"#).is_err());
    }

    /// Parameter gradients of each penalty, taken through the attributions of
    /// a small network, against central differences.
    #[test]
    fn penalty_parameter_gradients_match_finite_differences() {
        let p = 8;
        let spec = ModelSpec {
            input: InputShape::Grid(2, 4),
            layers: vec![
                LayerSpec { units: 6, activation: Activation::Tanh },
                LayerSpec { units: 1, activation: Activation::Identity },
            ],
            dropout: vec![],
        };
        let model = init_model(&spec, 3).unwrap();
        let x = Array2::from_shape_fn((5, p), |(i, j)| ((i * p + j) as f64 * 0.37).sin() * 1.5);
        let y = Array1::from_shape_fn(5, |i| (i as f64 * 0.9).cos());
        let graph = FeatureGraph::from_edges(p, &[(0, 1, 1.0), (1, 2, 0.5), (2, 3, 2.0), (4, 7, 1.0), (5, 6, 1.0)]).unwrap();
        let mask = Array2::from_shape_fn((5, p), |(i, j)| ((i + j) % 3 == 0) as u8 as f64);
        let rows: Vec<usize> = (0..5).collect();
        let mut specs = vec![
            PriorSpec::new(PriorKind::PixelTv, 1.0),
            PriorSpec::new(PriorKind::Graph, 1.0).with_graph(graph.clone()),
            PriorSpec::new(PriorKind::SparseGini, 1.0),
            PriorSpec::new(PriorKind::MixedL1Gini, 1.0),
            PriorSpec::new(PriorKind::RossGradMask, 1.0).with_mask(mask),
            PriorSpec::new(PriorKind::L1Attrib, 1.0),
            PriorSpec::new(PriorKind::L2Attrib, 1.0),
            PriorSpec::new(PriorKind::GiniGradients, 1.0),
            PriorSpec::new(PriorKind::L1Gradients, 1.0),
            PriorSpec::new(PriorKind::SglAll, 1.0),
            PriorSpec::new(PriorKind::L2First, 1.0),
        ];
        let mut unnorm = PriorSpec::new(PriorKind::PixelTv, 1.0);
        unnorm.normalize = false;
        specs.push(unnorm);
        for spec in &specs {
            let inputs: Vec<Array2<f64>> = model
                .layers
                .iter()
                .flat_map(|l| [l.weights.clone(), l.biases.clone().insert_axis(Axis(0))])
                .collect();
            let err = gradient_check(
                |v| {
                    let params = Params { weights: vec![v[0], v[2]], biases: vec![v[1], v[3]] };
                    let ctx = PriorContext {
                        model: &model,
                        params: &params,
                        x: x.view(),
                        y: &y,
                        rows: &rows,
                        loss: LossSpec::Mse,
                        k: 3,
                        classes: None,
                    };
                    let mut r = rng::stream(17, &[]);
                    prior_penalty(spec, &ctx, &mut r)
                },
                &inputs,
                1e-6,
            )
            .unwrap();
            assert!(err <= 1e-3, "{:?}: {err}", spec.kind);
        }
    }

    fn random_graph(p: usize, seed: u64) -> FeatureGraph {
        use rand::Rng as _;
        let mut r = rng::stream(seed, &[]);
        let mut edges = Vec::new();
        for i in 0..p {
            for j in i + 1..p {
                if r.random::<f64>() < 0.35 {
                    edges.push((i, j, r.random_range(0.1..2.0)));
                }
            }
        }
        FeatureGraph::from_edges(p, &edges).unwrap()
    }

    fn components(g: &FeatureGraph) -> Vec<usize> {
        let p = g.n_nodes();
        let mut label: Vec<usize> = (0..p).collect();
        loop {
            let mut changed = false;
            for (i, j, _) in g.edges() {
                let m = label[i].min(label[j]);
                if label[i] != m || label[j] != m {
                    label[i] = m;
                    label[j] = m;
                    changed = true;
                }
            }
            if !changed {
                return label;
            }
        }
    }

    proptest! {
        #[test]
        fn gini_permutation_invariant(v in prop::collection::vec(0.0f64..5.0, 2..10), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut w = v.clone();
            w.shuffle(&mut rng::stream(seed, &[]));
            let a = gini_penalty_value(&Array1::from(v)).unwrap();
            let b = gini_penalty_value(&Array1::from(w)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn graph_penalty_psd_and_null_space(p in 2usize..=8, seed in any::<u64>(), v in prop::collection::vec(-3.0f64..3.0, 8)) {
            let g = random_graph(p, seed);
            let phibar = Array1::from(v[..p].to_vec());
            let tape = Tape::new();
            let q = graph_penalty(tape.leaf(phibar.clone().insert_axis(Axis(0))), &g).unwrap().item();
            let eig = nalgebra::DMatrix::from_fn(p, p, |i, j| g.laplacian()[[i, j]]).symmetric_eigen();
            let min_eig = eig.eigenvalues.min();
            prop_assert!(min_eig > -1e-10);
            let oracle: f64 = (0..p)
                .map(|i| {
                    let c: f64 = (0..p).map(|j| eig.eigenvectors[(j, i)] * phibar[j]).sum();
                    eig.eigenvalues[i] * c * c
                })
                .sum();
            prop_assert!(q >= -1e-12);
            prop_assert!((q - oracle).abs() <= 1e-9 * (1.0 + q.abs()));

            // Constant on each connected component gives zero.
            let comp = components(&g);
            let piecewise = Array1::from_shape_fn(p, |i| v[comp[i]]);
            let z = graph_penalty(tape.leaf(piecewise.insert_axis(Axis(0))), &g).unwrap().item();
            prop_assert!(z.abs() < 1e-10);
        }

        #[test]
        fn tv_normalized_scale_invariant(v in prop::collection::vec(-2.0f64..2.0, 6), c in 0.1f64..50.0) {
            let phi = Array2::from_shape_vec((1, 6), v).unwrap();
            let std = phi.std(0.0);
            prop_assume!(std > 1e-3);
            let a = tv_value(&phi, (2, 3), true).unwrap();
            let b = tv_value(&(&phi * c), (2, 3), true).unwrap();
            // Undo the floor on each side, then compare.
            let a = a * (std + 1e-8) / std;
            let b = b * (c * std + 1e-8) / (c * std);
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-12));
        }
    }
}
