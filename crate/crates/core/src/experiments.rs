//! Replicated experiment protocols driven by a declarative [`ExperimentConfig`].
//!
//! Each protocol runs independent replicates that produce serializable
//! reports; aggregates are computed from those reports alone.

use std::path::PathBuf;
use std::sync::Mutex;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::attrib::{
    expected_gradients_matrix, global_mean_abs, grad_attrib, integrated_gradients_matrix, random_attrib,
    AttributionMatrix, ReferenceSet, Target,
};
use crate::bench::{compare_methods, rank_methods, run_all_18, BenchmarkResult, Comparison, Curve, MaskKind,
    MaskingStrategy, MetricResult};
use crate::data::{
    gen_correlated_groups_60, gen_graph_task, gen_image_task, gen_independent_linear_60, gen_sparse_binary,
    load_csv, randomize_graph, split_counts, Dataset, GraphSpec, Standardizer, Task,
};
use crate::error::{Error, Result};
use crate::eval::{gini_coefficient, lorenz_curve, noise_robustness, paired_t_test, RobustnessCurve, TTest};
use crate::nn::{init_model, Activation, InputShape, LayerSpec, LossSpec, Model, ModelSpec};
use crate::par::{self, Exec};
use crate::priors::{tv_value, FeatureGraph, PriorKind, PriorSpec};
use crate::rng::{derive_seed, TAG_EG, TAG_GRAPH, TAG_NOISE, TAG_RANDOM_ATTR, TAG_REPLICATE};
use crate::train::{
    alternating_finetune, evaluate, lambda_sweep, train, LambdaReport, LambdaSelection, Nu, OptimizerSpec,
    StopOn, TrainConfig, ValMetric,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Benchmark,
    Image,
    Graph,
    Sparse,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    IndependentLinear60 {
        n: usize,
    },
    CorrelatedGroups60 {
        n: usize,
    },
    Image {
        n: usize,
        height: usize,
        width: usize,
        #[serde(default)]
        noise_sigma: f64,
    },
    Graph {
        n: usize,
        p: usize,
        #[serde(default)]
        graph: GraphSpec,
    },
    SparseBinary {
        n: usize,
        p: usize,
        informative: usize,
    },
    Csv {
        path: PathBuf,
        label_column: String,
    },
}

impl DatasetSpec {
    pub fn generate(&self, seed: u64) -> Result<(Dataset, Option<FeatureGraph>)> {
        Ok(match self {
            DatasetSpec::IndependentLinear60 { n } => (gen_independent_linear_60(*n, seed)?, None),
            DatasetSpec::CorrelatedGroups60 { n } => (gen_correlated_groups_60(*n, seed)?, None),
            DatasetSpec::Image { n, height, width, noise_sigma } => {
                (gen_image_task(*n, *height, *width, *noise_sigma, seed)?, None)
            }
            DatasetSpec::Graph { n, p, graph } => {
                let (d, g) = gen_graph_task(*n, *p, graph, seed)?;
                (d, Some(g))
            }
            DatasetSpec::SparseBinary { n, p, informative } => (gen_sparse_binary(*n, *p, *informative, seed)?, None),
            DatasetSpec::Csv { path, label_column } => (load_csv(path, label_column)?, None),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: usize,
    #[serde(default)]
    pub val: usize,
    pub test: usize,
}

fn default_activation() -> Activation {
    Activation::Relu
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Dropout after each hidden layer.
    #[serde(default)]
    pub dropout: f64,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// References per sample for expected-gradients priors during training.
    #[serde(default = "one")]
    pub k: usize,
    #[serde(default)]
    pub patience: Option<usize>,
    #[serde(default)]
    pub stop_on: StopOn,
    /// Alternating fine-tuning epochs after pretraining (graph protocol).
    #[serde(default)]
    pub finetune_epochs: usize,
    /// Early-stopping patience during fine-tuning; off by default.
    #[serde(default)]
    pub finetune_patience: Option<usize>,
    #[serde(default = "default_nu")]
    pub nu: Nu,
    #[serde(default)]
    pub val_metric: Option<ValMetric>,
}

fn default_nu() -> Nu {
    Nu::Auto
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributionConfig {
    /// Reference draws per explained sample.
    pub eg_k: usize,
    pub ig_steps: usize,
    /// Explain at most this many test rows.
    pub explain: Option<usize>,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self { eg_k: 200, ig_steps: 100, explain: None }
    }
}

fn yes() -> bool {
    true
}

fn default_slack() -> f64 {
    0.1
}

fn default_draws() -> usize {
    crate::bench::DEFAULT_DRAWS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub replicates: usize,
    pub dataset: DatasetSpec,
    pub split: SplitSpec,
    #[serde(default = "yes")]
    pub standardize: bool,
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    pub training: TrainingConfig,
    #[serde(default)]
    pub priors: Vec<PriorSpec>,
    #[serde(default)]
    pub lambda_grid: Vec<f64>,
    /// Relative validation slack for λ selection.
    #[serde(default = "default_slack")]
    pub slack: f64,
    #[serde(default)]
    pub attribution: AttributionConfig,
    #[serde(default = "default_draws")]
    pub resample_draws: usize,
    /// Test-time noise levels for the robustness curve; must start at 0.
    #[serde(default)]
    pub noise_sigmas: Vec<f64>,
    #[serde(default = "yes")]
    pub random_graph_control: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidSpec(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks everything that can be checked without generating data.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(bad(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version)));
        }
        if self.replicates == 0 {
            return Err(bad("replicates must be at least 1"));
        }
        if self.split.train == 0 || self.split.test == 0 {
            return Err(bad("split needs training and test rows"));
        }
        if self.training.epochs == 0 || self.training.batch_size == 0 {
            return Err(bad("epochs and batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(bad("dropout must lie in [0, 1)"));
        }
        if self.model.hidden.contains(&0) {
            return Err(bad("hidden layer sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.slack) {
            return Err(bad("slack must lie in [0, 1)"));
        }
        if self.lambda_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(bad("λ grid entries must be finite and nonnegative"));
        }
        if self.attribution.eg_k == 0 || self.attribution.ig_steps == 0 {
            return Err(bad("eg_k and ig_steps must be positive"));
        }
        self.optimizer.validate()?;
        for p in &self.priors {
            if p.kind == PriorKind::RossGradMask {
                return Err(bad("the gradient-mask prior needs a mask and cannot be configured from JSON"));
            }
            if !(p.strength.is_finite() && p.strength >= 0.0) {
                return Err(bad(format!("prior strength {} is invalid", p.strength)));
            }
        }
        let swept = || -> Result<&PriorSpec> {
            let p = self.priors.first().ok_or_else(|| bad("the first prior is the one swept over λ; none given"))?;
            if !p.kind.uses_attributions() {
                return Err(bad(format!("{:?} is not an attribution prior", p.kind)));
            }
            Ok(p)
        };
        match self.experiment {
            ExperimentKind::Benchmark => {}
            ExperimentKind::Image => {
                if !matches!(self.dataset, DatasetSpec::Image { .. }) {
                    return Err(bad("the image experiment needs an image dataset"));
                }
                swept()?;
                if self.lambda_grid.iter().all(|&l| l == 0.0) {
                    return Err(bad("the image experiment needs a positive λ in lambda_grid"));
                }
                if self.noise_sigmas.first() != Some(&0.0) || self.noise_sigmas.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(bad("noise_sigmas must start at 0 and increase strictly"));
                }
                if self.split.val == 0 {
                    return Err(bad("λ selection needs validation rows"));
                }
            }
            ExperimentKind::Graph => {
                if !matches!(self.dataset, DatasetSpec::Graph { .. }) {
                    return Err(bad("the graph experiment needs a graph dataset"));
                }
                if !self.priors.iter().any(|p| p.kind == PriorKind::Graph) {
                    return Err(bad("the graph experiment needs a graph prior"));
                }
                if self.training.finetune_epochs == 0 {
                    return Err(bad("the graph experiment needs finetune_epochs > 0"));
                }
            }
            ExperimentKind::Sparse => {
                swept()?;
                if self.lambda_grid.is_empty() || self.lambda_grid.contains(&0.0) {
                    return Err(bad("the sparse experiment needs a grid of positive λ values"));
                }
                if self.split.val == 0 {
                    return Err(bad("λ selection needs validation rows"));
                }
            }
            ExperimentKind::Custom => {}
        }
        Ok(())
    }

    /// Seed of replicate `r`.
    pub fn replicate_seed(&self, r: usize) -> u64 {
        derive_seed(self.seed, &[TAG_REPLICATE, r as u64])
    }
}

/// Train/validation/test data for one replicate, standardized on the
/// training rows when configured.
pub struct Prepared {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Dataset,
    pub graph: Option<FeatureGraph>,
    pub outputs: usize,
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let (data, graph) = cfg.dataset.generate(seed)?;
    let outputs = match data.task {
        Task::Multiclass => data.y.iter().fold(0.0f64, |a, &b| a.max(b)) as usize + 1,
        _ => 1,
    };
    let s = split_counts(&data, cfg.split.train, cfg.split.val, cfg.split.test, seed)?;
    let (mut train, mut val, mut test) = (s.train, s.val, s.test);
    if cfg.standardize {
        let st = Standardizer::fit(train.x.view())?;
        train = st.apply_dataset(&train)?;
        val = st.apply_dataset(&val)?;
        test = st.apply_dataset(&test)?;
    }
    let val = (val.n() > 0).then_some(val);
    Ok(Prepared { train, val, test, graph, outputs })
}

fn head(task: Task) -> (Activation, LossSpec) {
    match task {
        Task::Regression => (Activation::Identity, LossSpec::Mse),
        Task::Binary => (Activation::Sigmoid, LossSpec::BinaryCrossEntropy),
        Task::Multiclass => (Activation::Softmax, LossSpec::SoftmaxCrossEntropy),
    }
}

pub fn build_model(cfg: &ExperimentConfig, d: &Prepared, seed: u64) -> Result<Model> {
    let (act, _) = head(d.train.task);
    let mut layers: Vec<LayerSpec> =
        cfg.model.hidden.iter().map(|&units| LayerSpec { units, activation: cfg.model.activation }).collect();
    layers.push(LayerSpec { units: d.outputs, activation: act });
    let mut dropout = vec![cfg.model.dropout; cfg.model.hidden.len()];
    dropout.push(0.0);
    let input = match d.train.grid {
        Some((h, w)) => InputShape::Grid(h, w),
        None => InputShape::Flat(d.train.p()),
    };
    init_model(&ModelSpec { input, layers, dropout }, seed)
}

/// Held-out score where larger is better: R², ROC-AUC, or accuracy.
pub fn test_metric_kind(task: Task) -> ValMetric {
    match task {
        Task::Regression => ValMetric::RSquared,
        Task::Binary => ValMetric::RocAuc,
        Task::Multiclass => ValMetric::Accuracy,
    }
}

pub fn train_config(cfg: &ExperimentConfig, task: Task, seed: u64, priors: Vec<PriorSpec>) -> TrainConfig {
    let (_, loss) = head(task);
    TrainConfig {
        epochs: cfg.training.epochs,
        batch_size: cfg.training.batch_size,
        k: cfg.training.k,
        priors,
        patience: cfg.training.patience,
        stop_on: cfg.training.stop_on,
        seed,
        alternating: false,
        optimizer: cfg.optimizer.clone(),
        loss,
        val_metric: cfg.training.val_metric.unwrap_or(test_metric_kind(task)),
    }
}

/// Priors with the dataset's graph attached where needed.
pub fn resolve_priors(priors: &[PriorSpec], graph: Option<&FeatureGraph>) -> Result<Vec<PriorSpec>> {
    priors
        .iter()
        .map(|p| {
            if p.kind.needs_graph() {
                let g = graph.ok_or_else(|| bad(format!("{:?} needs a graph dataset", p.kind)))?;
                Ok(p.clone().with_graph(g.clone()))
            } else {
                Ok(p.clone())
            }
        })
        .collect()
}

/// The first `attribution.explain` rows of `d`, or all of them.
pub fn explain_rows(cfg: &ExperimentConfig, d: &Dataset) -> Dataset {
    let n = cfg.attribution.explain.map_or(d.n(), |m| m.min(d.n()));
    d.subset(&(0..n).collect::<Vec<_>>())
}

fn target_for(model: &Model, d: &Dataset) -> Target {
    match (model.n_outputs() > 1, d.classes()) {
        (true, Some(c)) => Target::PerSample(c),
        _ => Target::First,
    }
}

/// Expected-gradients attributions of `d` against the training rows.
pub fn eg_attributions(
    cfg: &ExperimentConfig,
    model: &Model,
    train_rows: &Dataset,
    d: &Dataset,
    seed: u64,
    exec: Exec,
) -> Result<AttributionMatrix> {
    let refs = ReferenceSet::new(train_rows.x.clone())?;
    let target = target_for(model, d);
    expected_gradients_matrix(model, d.x.view(), &refs, cfg.attribution.eg_k, derive_seed(seed, &[TAG_EG]), &target, exec)
}

fn global(phi: &AttributionMatrix) -> Result<Array1<f64>> {
    Ok(global_mean_abs(phi)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "kebab-case")]
pub enum ReplicateReport {
    Benchmark(BenchmarkReplicate),
    Image(ImageReplicate),
    Graph(GraphReplicate),
    Sparse(SparseReplicate),
    Custom(CustomReplicate),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "kebab-case")]
pub enum AggregateReport {
    Benchmark(BenchmarkAggregate),
    Image(ImageAggregate),
    Graph(GraphAggregate),
    Sparse(SparseAggregate),
    Custom(CustomAggregate),
}

pub fn run_replicate(cfg: &ExperimentConfig, r: usize, exec: Exec) -> Result<ReplicateReport> {
    let seed = cfg.replicate_seed(r);
    Ok(match cfg.experiment {
        ExperimentKind::Benchmark => ReplicateReport::Benchmark(benchmark_replicate(cfg, r, seed, exec)?),
        ExperimentKind::Image => ReplicateReport::Image(image_replicate(cfg, r, seed, exec)?),
        ExperimentKind::Graph => ReplicateReport::Graph(graph_replicate(cfg, r, seed, exec)?),
        ExperimentKind::Sparse => ReplicateReport::Sparse(sparse_replicate(cfg, r, seed, exec)?),
        ExperimentKind::Custom => ReplicateReport::Custom(custom_replicate(cfg, r, seed, exec)?),
    })
}

/// Aggregates replicate reports; a pure function of its inputs.
pub fn aggregate(cfg: &ExperimentConfig, reports: &[ReplicateReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(bad("no replicate reports to aggregate"));
    }
    macro_rules! collect {
        ($variant:ident) => {
            reports
                .iter()
                .map(|r| match r {
                    ReplicateReport::$variant(x) => Ok(x.clone()),
                    _ => Err(bad("replicate reports come from different experiments")),
                })
                .collect::<Result<Vec<_>>>()?
        };
    }
    Ok(match cfg.experiment {
        ExperimentKind::Benchmark => AggregateReport::Benchmark(benchmark_aggregate(&collect!(Benchmark))?),
        ExperimentKind::Image => AggregateReport::Image(image_aggregate(&collect!(Image))?),
        ExperimentKind::Graph => AggregateReport::Graph(graph_aggregate(&collect!(Graph))?),
        ExperimentKind::Sparse => AggregateReport::Sparse(sparse_aggregate(&collect!(Sparse))?),
        ExperimentKind::Custom => AggregateReport::Custom(custom_aggregate(&collect!(Custom))?),
    })
}

/// Runs every replicate (in parallel under `exec`) and aggregates them.
pub fn run_experiment(cfg: &ExperimentConfig, exec: Exec) -> Result<(Vec<ReplicateReport>, AggregateReport)> {
    cfg.validate()?;
    let reports = par::try_map_range(exec, cfg.replicates, |r| run_replicate(cfg, r, exec))?;
    let agg = aggregate(cfg, &reports)?;
    Ok((reports, agg))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_vectors(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    (0..rows[0].len()).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

/// Trained model plus the attributions of the four benchmarked methods.
pub struct BenchmarkRun {
    pub model: Model,
    pub test_metric: f64,
    pub attributions: Vec<AttributionMatrix>,
    pub results: Vec<BenchmarkResult>,
}

/// Trains one model and benchmarks expected gradients, integrated gradients
/// (zero baseline), input gradients and random attributions on test rows.
pub fn benchmark_run(cfg: &ExperimentConfig, seed: u64, exec: Exec) -> Result<BenchmarkRun> {
    let d = prepare(cfg, seed)?;
    let model = build_model(cfg, &d, seed)?;
    if model.n_outputs() != 1 {
        return Err(bad("benchmarks need a single-output model"));
    }
    let tc = train_config(cfg, d.train.task, seed, Vec::new());
    let model = train(&model, &d.train, d.val.as_ref(), &tc)?.model;
    let test_metric = evaluate(&model, &d.test, tc.loss, test_metric_kind(d.test.task))?;
    let x = explain_rows(cfg, &d.test);
    let p = x.p();
    let eg = eg_attributions(cfg, &model, &d.train, &x, seed, exec)?;
    let ig =
        integrated_gradients_matrix(&model, x.x.view(), Array1::zeros(p).view(), cfg.attribution.ig_steps, &Target::First, exec)?;
    let grad = grad_attrib(&model, x.x.view(), &Target::First)?;
    let rand = random_attrib((x.n(), p), derive_seed(seed, &[TAG_RANDOM_ATTR]));
    let strategies = MaskKind::ALL
        .iter()
        .map(|&k| MaskingStrategy::new(k, cfg.resample_draws, seed).fit(d.train.x.view()))
        .collect::<Result<Vec<_>>>()?;
    let attributions = vec![eg, ig, grad, rand];
    let results = attributions
        .iter()
        .map(|phi| run_all_18(&model, x.x.view(), phi, &strategies, exec))
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchmarkRun { model, test_metric, attributions, results })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReplicate {
    pub replicate: usize,
    pub seed: u64,
    pub test_metric: f64,
    pub results: Vec<BenchmarkResult>,
}

fn benchmark_replicate(cfg: &ExperimentConfig, r: usize, seed: u64, exec: Exec) -> Result<BenchmarkReplicate> {
    let run = benchmark_run(cfg, seed, exec)?;
    Ok(BenchmarkReplicate { replicate: r, seed, test_metric: run.test_metric, results: run.results })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairComparison {
    pub a: String,
    pub b: String,
    #[serde(flatten)]
    pub comparison: Comparison,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkAggregate {
    pub mean_test_metric: f64,
    /// Scores and curves averaged over replicates.
    pub mean_results: Vec<BenchmarkResult>,
    /// Metric-wise comparisons of the averaged scores for every ordered pair.
    pub comparisons: Vec<PairComparison>,
    pub ranking: Vec<(String, usize)>,
}

impl BenchmarkAggregate {
    pub fn comparison(&self, a: &str, b: &str) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| c.a == a && c.b == b).map(|c| &c.comparison)
    }
}

/// Averages per-metric scores and curves over benchmark replicates.
pub fn mean_benchmark(per_replicate: &[Vec<BenchmarkResult>]) -> Result<Vec<BenchmarkResult>> {
    let first = per_replicate.first().ok_or_else(|| bad("no benchmark results"))?;
    let n = per_replicate.len() as f64;
    first
        .iter()
        .enumerate()
        .map(|(m, res)| {
            let metrics = res
                .metrics
                .iter()
                .enumerate()
                .map(|(j, mr)| {
                    let all: Vec<&MetricResult> = per_replicate.iter().map(|rep| &rep[m].metrics[j]).collect();
                    if all.iter().any(|x| x.name != mr.name) || per_replicate.iter().any(|rep| rep[m].method != res.method) {
                        return Err(bad("benchmark replicates disagree on methods or metrics"));
                    }
                    let values = (0..mr.curve.values.len())
                        .map(|c| all.iter().map(|x| x.curve.values[c]).sum::<f64>() / n)
                        .collect();
                    Ok(MetricResult {
                        name: mr.name.clone(),
                        spec: mr.spec,
                        score: all.iter().map(|x| x.score).sum::<f64>() / n,
                        curve: Curve { fractions: mr.curve.fractions.clone(), values },
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(BenchmarkResult { method: res.method.clone(), metrics })
        })
        .collect()
}

fn benchmark_aggregate(reps: &[BenchmarkReplicate]) -> Result<BenchmarkAggregate> {
    let per: Vec<Vec<BenchmarkResult>> = reps.iter().map(|r| r.results.clone()).collect();
    let mean_results = mean_benchmark(&per)?;
    let mut comparisons = Vec::new();
    for a in &mean_results {
        for b in &mean_results {
            if a.method != b.method {
                comparisons.push(PairComparison {
                    a: a.method.clone(),
                    b: b.method.clone(),
                    comparison: compare_methods(a, b)?,
                });
            }
        }
    }
    let test: Vec<f64> = reps.iter().map(|r| r.test_metric).collect();
    Ok(BenchmarkAggregate {
        mean_test_metric: mean(&test),
        ranking: rank_methods(&mean_results)?,
        mean_results,
        comparisons,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphArm {
    pub test_r2: f64,
    /// `φ̄ᵀ L φ̄` of test attributions over the true graph.
    pub smoothness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphReplicate {
    pub replicate: usize,
    pub seed: u64,
    pub base: GraphArm,
    pub graph: GraphArm,
    pub random: Option<GraphArm>,
    pub nu: f64,
    pub initial_ratio: f64,
    /// Training-set graph penalty before and after each fine-tuning epoch.
    pub finetune_penalty: Vec<f64>,
}

fn graph_arm(cfg: &ExperimentConfig, model: &Model, d: &Prepared, g: &FeatureGraph, seed: u64, exec: Exec) -> Result<GraphArm> {
    let test_r2 = evaluate(model, &d.test, LossSpec::Mse, ValMetric::RSquared)?;
    let x = explain_rows(cfg, &d.test);
    let phi = eg_attributions(cfg, model, &d.train, &x, seed, exec)?;
    Ok(GraphArm { test_r2, smoothness: g.quadratic_form(&global(&phi)?) })
}

/// Pretrains without priors, then fine-tunes by alternating loss and graph
/// prior passes, with the true and a randomized graph.
fn graph_replicate(cfg: &ExperimentConfig, r: usize, seed: u64, exec: Exec) -> Result<GraphReplicate> {
    let d = prepare(cfg, seed)?;
    let g = d.graph.clone().ok_or_else(|| bad("the graph experiment needs a graph dataset"))?;
    let model = build_model(cfg, &d, seed)?;
    let weight_priors: Vec<PriorSpec> =
        cfg.priors.iter().filter(|p| p.kind.weight_penalty().is_some()).cloned().collect();
    let pre_cfg = train_config(cfg, d.train.task, seed, weight_priors);
    let base = train(&model, &d.train, d.val.as_ref(), &pre_cfg)?.model;

    let finetune = |graph: &FeatureGraph| -> Result<(Model, f64, f64, Vec<f64>)> {
        let priors = cfg
            .priors
            .iter()
            .map(|p| if p.kind == PriorKind::Graph { p.clone().with_graph(graph.clone()) } else { p.clone() })
            .collect();
        let mut fc = train_config(cfg, d.train.task, seed, priors);
        fc.patience = cfg.training.finetune_patience;
        let out = alternating_finetune(&base, &d.train, d.val.as_ref(), &fc, cfg.training.nu, cfg.training.finetune_epochs)?;
        Ok((out.result.model, out.nu, out.initial_ratio, out.full_penalty))
    };
    let (tuned, nu, initial_ratio, finetune_penalty) = finetune(&g)?;
    let random = if cfg.random_graph_control {
        let rg = randomize_graph(&g, derive_seed(seed, &[TAG_GRAPH]))?;
        let (m, ..) = finetune(&rg)?;
        Some(graph_arm(cfg, &m, &d, &g, seed, exec)?)
    } else {
        None
    };
    Ok(GraphReplicate {
        replicate: r,
        seed,
        base: graph_arm(cfg, &base, &d, &g, seed, exec)?,
        graph: graph_arm(cfg, &tuned, &d, &g, seed, exec)?,
        random,
        nu,
        initial_ratio,
        finetune_penalty,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphAggregate {
    pub mean_r2_base: f64,
    pub mean_r2_graph: f64,
    pub mean_r2_random: Option<f64>,
    pub mean_smoothness_base: f64,
    pub mean_smoothness_graph: f64,
    /// Mean base smoothness over mean fine-tuned smoothness.
    pub smoothness_reduction: f64,
    pub graph_vs_base: Option<TTest>,
    pub random_vs_base: Option<TTest>,
}

/// Paired test, or `None` with fewer than three pairs or constant differences.
fn paired(a: &[f64], b: &[f64]) -> Result<Option<TTest>> {
    if a.len() < 3 {
        return Ok(None);
    }
    match paired_t_test(a, b) {
        Ok(t) => Ok(Some(t)),
        Err(Error::DegeneratePairs) => Ok(None),
        Err(e) => Err(e),
    }
}

fn graph_aggregate(reps: &[GraphReplicate]) -> Result<GraphAggregate> {
    let base: Vec<f64> = reps.iter().map(|r| r.base.test_r2).collect();
    let tuned: Vec<f64> = reps.iter().map(|r| r.graph.test_r2).collect();
    let random: Option<Vec<f64>> = reps.iter().map(|r| r.random.as_ref().map(|a| a.test_r2)).collect();
    let sb = mean(&reps.iter().map(|r| r.base.smoothness).collect::<Vec<_>>());
    let sg = mean(&reps.iter().map(|r| r.graph.smoothness).collect::<Vec<_>>());
    Ok(GraphAggregate {
        mean_r2_base: mean(&base),
        mean_r2_graph: mean(&tuned),
        mean_r2_random: random.as_ref().map(|v| mean(v)),
        mean_smoothness_base: sb,
        mean_smoothness_graph: sg,
        smoothness_reduction: sb / sg,
        graph_vs_base: paired(&tuned, &base)?,
        random_vs_base: match &random {
            Some(v) => paired(v, &base)?,
            None => None,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseArm {
    pub lambda: f64,
    pub val_auc: f64,
    pub test_auc: f64,
    /// Gini coefficient of the mean absolute test attributions.
    pub gini: f64,
    pub lorenz: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseReplicate {
    pub replicate: usize,
    pub seed: u64,
    pub base: SparseArm,
    /// One entry per positive λ in the grid.
    pub grid: Vec<SparseArm>,
}

fn sparse_arm(
    cfg: &ExperimentConfig,
    d: &Prepared,
    model: &Model,
    lambda: f64,
    seed: u64,
    exec: Exec,
) -> Result<SparseArm> {
    let (_, loss) = head(d.train.task);
    let priors = if lambda > 0.0 {
        let mut p = resolve_priors(&cfg.priors, d.graph.as_ref())?;
        p[0].strength = lambda;
        p
    } else {
        Vec::new()
    };
    let tc = train_config(cfg, d.train.task, seed, priors);
    let m = train(model, &d.train, d.val.as_ref(), &tc)?.model;
    let val = d.val.as_ref().ok_or_else(|| bad("λ selection needs validation rows"))?;
    let x = explain_rows(cfg, &d.test);
    let phibar = global(&eg_attributions(cfg, &m, &d.train, &x, seed, exec)?)?;
    let (gini, lorenz) = if phibar.sum() > 0.0 {
        (gini_coefficient(phibar.view())?, lorenz_curve(phibar.view())?)
    } else {
        (0.0, (0..=phibar.len()).map(|i| i as f64 / phibar.len() as f64).collect())
    };
    let metric = test_metric_kind(d.test.task);
    Ok(SparseArm {
        lambda,
        val_auc: evaluate(&m, val, loss, metric)?,
        test_auc: evaluate(&m, &d.test, loss, metric)?,
        gini,
        lorenz,
    })
}

/// Trains an unregularized model and one model per positive λ from the same
/// initialization.
fn sparse_replicate(cfg: &ExperimentConfig, r: usize, seed: u64, exec: Exec) -> Result<SparseReplicate> {
    let d = prepare(cfg, seed)?;
    let model = build_model(cfg, &d, seed)?;
    let base = sparse_arm(cfg, &d, &model, 0.0, seed, exec)?;
    let grid = par::try_map_range(exec, cfg.lambda_grid.len(), |i| {
        sparse_arm(cfg, &d, &model, cfg.lambda_grid[i], seed, exec)
    })?;
    Ok(SparseReplicate { replicate: r, seed, base, grid })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseAggregate {
    /// λ with the highest validation ROC-AUC averaged over replicates.
    pub lambda: f64,
    pub mean_val_auc: Vec<(f64, f64)>,
    pub mean_test_auc_base: f64,
    pub mean_test_auc_prior: f64,
    pub mean_gini_base: f64,
    pub mean_gini_prior: f64,
    pub auc_prior_vs_base: Option<TTest>,
    pub gini_prior_vs_base: Option<TTest>,
    pub lorenz_base: Vec<f64>,
    pub lorenz_prior: Vec<f64>,
}

fn sparse_aggregate(reps: &[SparseReplicate]) -> Result<SparseAggregate> {
    let g = reps[0].grid.len();
    if g == 0 || reps.iter().any(|r| r.grid.len() != g) {
        return Err(bad("sparse replicates disagree on the λ grid"));
    }
    let mean_val_auc: Vec<(f64, f64)> = (0..g)
        .map(|i| (reps[0].grid[i].lambda, mean(&reps.iter().map(|r| r.grid[i].val_auc).collect::<Vec<_>>())))
        .collect();
    // First maximum wins ties.
    let best = (0..g).fold(0, |b, i| if mean_val_auc[i].1 > mean_val_auc[b].1 { i } else { b });
    let col = |f: &dyn Fn(&SparseReplicate) -> f64| reps.iter().map(f).collect::<Vec<f64>>();
    let auc_base = col(&|r| r.base.test_auc);
    let auc_prior = col(&|r| r.grid[best].test_auc);
    let gini_base = col(&|r| r.base.gini);
    let gini_prior = col(&|r| r.grid[best].gini);
    Ok(SparseAggregate {
        lambda: mean_val_auc[best].0,
        mean_val_auc,
        mean_test_auc_base: mean(&auc_base),
        mean_test_auc_prior: mean(&auc_prior),
        mean_gini_base: mean(&gini_base),
        mean_gini_prior: mean(&gini_prior),
        auc_prior_vs_base: paired(&auc_prior, &auc_base)?,
        gini_prior_vs_base: paired(&gini_prior, &gini_base)?,
        lorenz_base: mean_vectors(&reps.iter().map(|r| r.base.lorenz.clone()).collect::<Vec<_>>()),
        lorenz_prior: mean_vectors(&reps.iter().map(|r| r.grid[best].lorenz.clone()).collect::<Vec<_>>()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageArm {
    pub lambda: f64,
    /// Mean std-normalized total variation of test attributions.
    pub tv: f64,
    /// Test accuracy at each noise level.
    pub accuracy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageReplicate {
    pub replicate: usize,
    pub seed: u64,
    pub sigmas: Vec<f64>,
    pub selection: LambdaSelection,
    pub base: ImageArm,
    pub prior: ImageArm,
}

fn mean_tv(phi: &AttributionMatrix, grid: (usize, usize)) -> Result<f64> {
    Ok(tv_value(&phi.values, grid, true)? / phi.values.nrows() as f64)
}

/// Sweeps the pixel prior strength, selects λ on validation accuracy within
/// the slack, and compares the baseline and selected models under noise.
fn image_replicate(cfg: &ExperimentConfig, r: usize, seed: u64, exec: Exec) -> Result<ImageReplicate> {
    let d = prepare(cfg, seed)?;
    let grid = d.train.grid.ok_or_else(|| bad("the image experiment needs grid-shaped data"))?;
    let val = d.val.as_ref().ok_or_else(|| bad("λ selection needs validation rows"))?;
    let model = build_model(cfg, &d, seed)?;
    let priors = resolve_priors(&cfg.priors, None)?;
    let trained: Mutex<Vec<(u64, Model)>> = Mutex::new(Vec::new());
    let selection = lambda_sweep(&cfg.lambda_grid, cfg.slack, exec, |lambda| {
        let mut p = priors.clone();
        p[0].strength = lambda;
        if lambda == 0.0 {
            p.clear();
        }
        let tc = train_config(cfg, d.train.task, seed, p);
        let m = train(&model, &d.train, Some(val), &tc)?.model;
        let val_metric = evaluate(&m, val, tc.loss, ValMetric::Accuracy)?;
        let phi = eg_attributions(cfg, &m, &d.train, &explain_rows(cfg, val), seed, exec)?;
        let penalty = mean_tv(&phi, grid)?;
        trained.lock().unwrap().push((lambda.to_bits(), m));
        Ok(LambdaReport { lambda, val_metric, penalty })
    })?;
    let trained = trained.into_inner().unwrap();
    let find = |l: f64| trained.iter().find(|(b, _)| *b == l.to_bits()).map(|(_, m)| m.clone()).unwrap();
    let (base, prior) = (find(0.0), find(selection.lambda));
    let curve = noise_robustness(&[base.clone(), prior.clone()], &d.test, &cfg.noise_sigmas, derive_seed(seed, &[TAG_NOISE]), exec)?;
    let x = explain_rows(cfg, &d.test);
    let arm = |m: &Model, lambda: f64, acc: &[f64]| -> Result<ImageArm> {
        let phi = eg_attributions(cfg, m, &d.train, &x, seed, exec)?;
        Ok(ImageArm { lambda, tv: mean_tv(&phi, grid)?, accuracy: acc.to_vec() })
    };
    Ok(ImageReplicate {
        replicate: r,
        seed,
        sigmas: cfg.noise_sigmas.clone(),
        base: arm(&base, 0.0, &curve.per_model[0])?,
        prior: arm(&prior, selection.lambda, &curve.per_model[1])?,
        selection,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageAggregate {
    pub sigmas: Vec<f64>,
    pub base: RobustnessCurve,
    pub prior: RobustnessCurve,
    pub mean_tv_base: f64,
    pub mean_tv_prior: f64,
    pub lambdas: Vec<f64>,
    /// Replicates where no positive λ stayed within the slack.
    pub warnings: usize,
}

fn curve_over(sigmas: &[f64], rows: Vec<Vec<f64>>) -> RobustnessCurve {
    let n = rows.len() as f64;
    let mean_accuracy = mean_vectors(&rows);
    let std_accuracy = (0..sigmas.len())
        .map(|j| {
            if rows.len() < 2 {
                0.0
            } else {
                (rows.iter().map(|r| (r[j] - mean_accuracy[j]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            }
        })
        .collect();
    RobustnessCurve { sigmas: sigmas.to_vec(), mean_accuracy, std_accuracy, per_model: rows }
}

fn image_aggregate(reps: &[ImageReplicate]) -> Result<ImageAggregate> {
    let sigmas = reps[0].sigmas.clone();
    if reps.iter().any(|r| r.sigmas != sigmas) {
        return Err(bad("image replicates disagree on the noise grid"));
    }
    Ok(ImageAggregate {
        base: curve_over(&sigmas, reps.iter().map(|r| r.base.accuracy.clone()).collect()),
        prior: curve_over(&sigmas, reps.iter().map(|r| r.prior.accuracy.clone()).collect()),
        sigmas,
        mean_tv_base: mean(&reps.iter().map(|r| r.base.tv).collect::<Vec<_>>()),
        mean_tv_prior: mean(&reps.iter().map(|r| r.prior.tv).collect::<Vec<_>>()),
        lambdas: reps.iter().map(|r| r.selection.lambda).collect(),
        warnings: reps.iter().filter(|r| r.selection.warning).count(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CustomReplicate {
    pub replicate: usize,
    pub seed: u64,
    pub test_metric: f64,
    pub final_train_loss: f64,
    pub final_prior_penalty: f64,
    pub global_attribution: Vec<f64>,
}

fn custom_replicate(cfg: &ExperimentConfig, r: usize, seed: u64, exec: Exec) -> Result<CustomReplicate> {
    let d = prepare(cfg, seed)?;
    let model = build_model(cfg, &d, seed)?;
    let tc = train_config(cfg, d.train.task, seed, resolve_priors(&cfg.priors, d.graph.as_ref())?);
    let res = train(&model, &d.train, d.val.as_ref(), &tc)?;
    let x = explain_rows(cfg, &d.test);
    let phi = eg_attributions(cfg, &res.model, &d.train, &x, seed, exec)?;
    Ok(CustomReplicate {
        replicate: r,
        seed,
        test_metric: evaluate(&res.model, &d.test, tc.loss, test_metric_kind(d.test.task))?,
        final_train_loss: res.train_loss.last().copied().unwrap_or(f64::NAN),
        final_prior_penalty: res.prior_penalty.last().copied().unwrap_or(0.0),
        global_attribution: global(&phi)?.to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CustomAggregate {
    pub mean_test_metric: f64,
    pub mean_global_attribution: Vec<f64>,
}

fn custom_aggregate(reps: &[CustomReplicate]) -> Result<CustomAggregate> {
    Ok(CustomAggregate {
        mean_test_metric: mean(&reps.iter().map(|r| r.test_metric).collect::<Vec<_>>()),
        mean_global_attribution: mean_vectors(&reps.iter().map(|r| r.global_attribution.clone()).collect::<Vec<_>>()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub dataset: DatasetSpec,
    pub n_train: usize,
    /// Rows explained per seed.
    pub n_explain: usize,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    pub k_grid: Vec<usize>,
    /// Draws for the baseline estimate; a smaller `k` uses a prefix of them.
    pub baseline_k: usize,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub k_grid: Vec<usize>,
    /// Mean absolute difference to the baseline, one row per seed.
    pub per_seed: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

/// Expected-gradients convergence against a large-`k` baseline.
pub fn run_convergence(cfg: &ConvergenceConfig, exec: Exec) -> Result<ConvergenceReport> {
    if cfg.seeds.is_empty() {
        return Err(bad("convergence needs at least one seed"));
    }
    let ec = ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        experiment: ExperimentKind::Custom,
        seed: 0,
        replicates: 1,
        dataset: cfg.dataset.clone(),
        split: SplitSpec { train: cfg.n_train, val: 0, test: cfg.n_explain },
        standardize: true,
        model: cfg.model.clone(),
        optimizer: cfg.optimizer.clone(),
        training: cfg.training.clone(),
        priors: Vec::new(),
        lambda_grid: Vec::new(),
        slack: default_slack(),
        attribution: AttributionConfig::default(),
        resample_draws: default_draws(),
        noise_sigmas: Vec::new(),
        random_graph_control: false,
        output_dir: None,
    };
    ec.validate()?;
    let per_seed = par::try_map_range(exec, cfg.seeds.len(), |i| {
        let seed = cfg.seeds[i];
        let d = prepare(&ec, seed)?;
        let model = build_model(&ec, &d, seed)?;
        let tc = train_config(&ec, d.train.task, seed, Vec::new());
        let model = train(&model, &d.train, None, &tc)?.model;
        let refs = ReferenceSet::new(d.train.x.clone())?;
        crate::attrib::convergence_diagnostic(
            &model,
            d.test.x.view(),
            &refs,
            &cfg.k_grid,
            cfg.baseline_k,
            derive_seed(seed, &[TAG_EG]),
            exec,
        )
    })?;
    Ok(ConvergenceReport { k_grid: cfg.k_grid.clone(), mean: mean_vectors(&per_seed), per_seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sparse_json() -> serde_json::Value {
        serde_json::json!({
            "schema_version": 1,
            "experiment": "sparse",
            "seed": 4,
            "replicates": 2,
            "dataset": { "kind": "sparse-binary", "n": 120, "p": 6, "informative": 2 },
            "split": { "train": 40, "val": 40, "test": 40 },
            "model": { "hidden": [4], "dropout": 0.0 },
            "training": { "epochs": 3, "batch_size": 20 },
            "priors": [{ "kind": "sparse-gini", "strength": 1.0 }],
            "lambda_grid": [0.1, 1.0],
            "attribution": { "eg_k": 5, "explain": 10 }
        })
    }

    fn parse(v: &serde_json::Value) -> Result<ExperimentConfig> {
        ExperimentConfig::from_json(&v.to_string())
    }

    #[test]
    fn config_defaults_and_errors() {
        let cfg = parse(&sparse_json()).unwrap();
        assert_eq!(cfg.slack, 0.1);
        assert_eq!(cfg.attribution.ig_steps, 100);
        assert_eq!(cfg.training.k, 1);
        assert!(cfg.standardize);
        assert_eq!(cfg.training.nu, Nu::Auto);

        let broken: Vec<(&str, serde_json::Value)> = vec![
            ("/schema_version", 2.into()),
            ("/replicates", 0.into()),
            ("/lambda_grid", serde_json::json!([0.0, 1.0])),
            ("/lambda_grid", serde_json::json!([-1.0])),
            ("/split/val", 0.into()),
            ("/model/dropout", 1.0.into()),
            ("/priors", serde_json::json!([{ "kind": "ross-grad-mask", "strength": 1.0 }])),
            ("/priors", serde_json::json!([{ "kind": "l1-all", "strength": 1.0 }])),
            ("/priors", serde_json::json!([])),
        ];
        for (path, value) in broken {
            let mut v = sparse_json();
            *v.pointer_mut(path).unwrap() = value.clone();
            assert!(matches!(parse(&v), Err(Error::InvalidSpec(_))), "{path} = {value}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for path in ["", "/dataset", "/split", "/model", "/training", "/attribution"] {
            let mut v = sparse_json();
            v.pointer_mut(path).unwrap().as_object_mut().unwrap().insert("typo".into(), 1.into());
            assert!(parse(&v).is_err(), "{path}");
        }
    }

    #[test]
    fn protocol_requirements() {
        let mut v = sparse_json();
        v["experiment"] = "image".into();
        assert!(parse(&v).is_err());
        v["dataset"] = serde_json::json!({ "kind": "image", "n": 120, "height": 4, "width": 4 });
        v["priors"] = serde_json::json!([{ "kind": "pixel-tv", "strength": 1.0 }]);
        assert!(parse(&v).is_err());
        v["noise_sigmas"] = serde_json::json!([0.0, 1.0, 0.5]);
        assert!(parse(&v).is_err());
        v["noise_sigmas"] = serde_json::json!([0.0, 0.5]);
        parse(&v).unwrap();

        let mut g = sparse_json();
        g["experiment"] = "graph".into();
        g["dataset"] = serde_json::json!({ "kind": "graph", "n": 120, "p": 6 });
        g["priors"] = serde_json::json!([{ "kind": "graph", "strength": 1.0 }]);
        assert!(parse(&g).is_err());
        g["training"]["finetune_epochs"] = 2.into();
        parse(&g).unwrap();
    }

    #[test]
    fn replicate_seeds_differ() {
        let cfg = parse(&sparse_json()).unwrap();
        assert_ne!(cfg.replicate_seed(0), cfg.replicate_seed(1));
        assert_eq!(cfg.replicate_seed(1), parse(&sparse_json()).unwrap().replicate_seed(1));
    }

    #[test]
    fn sparse_run_is_deterministic_and_aggregate_is_pure() {
        let cfg = parse(&sparse_json()).unwrap();
        let (reps, agg) = run_experiment(&cfg, Exec::Sequential).unwrap();
        assert_eq!(reps.len(), 2);
        let (reps_par, agg_par) = run_experiment(&cfg, Exec::Parallel).unwrap();
        assert_eq!(reps, reps_par);
        assert_eq!(agg, agg_par);

        let text = serde_json::to_string(&reps).unwrap();
        let back: Vec<ReplicateReport> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, reps);
        assert_eq!(aggregate(&cfg, &back).unwrap(), agg);

        let AggregateReport::Sparse(s) = &agg else { panic!("wrong aggregate kind") };
        assert_eq!(s.mean_val_auc.len(), 2);
        assert_eq!(s.lorenz_base.len(), 7);
        assert!(s.auc_prior_vs_base.is_none());
    }

    fn sparse_rep(val: [f64; 2], test: [f64; 3], gini: [f64; 3]) -> SparseReplicate {
        let arm = |lambda, val_auc, test_auc, gini| SparseArm { lambda, val_auc, test_auc, gini, lorenz: vec![0.0, 1.0] };
        SparseReplicate {
            replicate: 0,
            seed: 0,
            base: arm(0.0, 0.5, test[0], gini[0]),
            grid: vec![arm(0.1, val[0], test[1], gini[1]), arm(1.0, val[1], test[2], gini[2])],
        }
    }

    #[test]
    fn sparse_selection_uses_mean_validation_auc() {
        let reps = [
            sparse_rep([0.9, 0.6], [0.7, 0.8, 0.75], [0.2, 0.4, 0.6]),
            sparse_rep([0.5, 0.7], [0.6, 0.7, 0.65], [0.3, 0.5, 0.7]),
            sparse_rep([0.6, 0.75], [0.65, 0.75, 0.7], [0.2, 0.4, 0.8]),
        ];
        // Means: λ=0.1 → 0.6667, λ=1 → 0.6833.
        let a = sparse_aggregate(&reps).unwrap();
        assert_eq!(a.lambda, 1.0);
        assert!((a.mean_test_auc_prior - 0.7).abs() < 1e-12);
        assert!((a.mean_gini_prior - 0.7).abs() < 1e-12);
        assert!((a.mean_gini_base - 0.7 / 3.0).abs() < 1e-12);
        assert!(a.gini_prior_vs_base.is_some());
        let tie = [sparse_rep([0.7, 0.7], [0.5; 3], [0.1; 3])];
        assert_eq!(sparse_aggregate(&tie).unwrap().lambda, 0.1);
    }

    #[test]
    fn aggregate_rejects_mixed_reports() {
        let cfg = parse(&sparse_json()).unwrap();
        let custom = ReplicateReport::Custom(CustomReplicate {
            replicate: 0,
            seed: 0,
            test_metric: 0.5,
            final_train_loss: 0.1,
            final_prior_penalty: 0.0,
            global_attribution: vec![1.0],
        });
        assert!(aggregate(&cfg, &[custom]).is_err());
        assert!(aggregate(&cfg, &[]).is_err());
    }

    #[test]
    fn image_aggregate_curves() {
        let rep = |acc_b: Vec<f64>, acc_p: Vec<f64>, tv_b, tv_p, lambda, warning| ImageReplicate {
            replicate: 0,
            seed: 0,
            sigmas: vec![0.0, 1.0],
            selection: LambdaSelection { lambda, index: 1, warning, reports: Vec::new() },
            base: ImageArm { lambda: 0.0, tv: tv_b, accuracy: acc_b },
            prior: ImageArm { lambda, tv: tv_p, accuracy: acc_p },
        };
        let reps = [rep(vec![1.0, 0.6], vec![0.9, 0.8], 100.0, 40.0, 0.01, false), rep(vec![1.0, 0.8], vec![1.0, 0.6], 80.0, 20.0, 0.0, true)];
        let a = image_aggregate(&reps).unwrap();
        assert_eq!(a.base.mean_accuracy, vec![1.0, 0.7]);
        assert!((a.prior.mean_accuracy[0] - 0.95).abs() < 1e-12);
        assert!((a.base.std_accuracy[1] - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!((a.mean_tv_base, a.mean_tv_prior), (90.0, 30.0));
        assert_eq!(a.lambdas, vec![0.01, 0.0]);
        assert_eq!(a.warnings, 1);
    }
}
