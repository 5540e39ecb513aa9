//! Optimizers, the prior-regularized training loop, alternating fine-tuning
//! and regularization-strength selection.

use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{accuracy, r_squared, roc_auc};
use crate::nn::{loss as mean_loss, loss_value, LossSpec, Model, Params};
use crate::par::{self, Exec};
use crate::priors::{compose_objective, prior_penalty, PriorContext, PriorSpec};
use crate::rng::{self, TAG_DROPOUT, TAG_EG_TRAIN, TAG_SHUFFLE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// The learning rate is multiplied by `decay_factor` every
    /// `decay_period` epochs.
    pub decay_factor: f64,
    pub decay_period: usize,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_factor: 1.0,
            decay_period: 1,
        }
    }
}

impl OptimizerSpec {
    pub fn adam(learning_rate: f64) -> Self {
        Self { learning_rate, ..Self::default() }
    }

    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        Self { kind: OptimizerKind::SgdMomentum, learning_rate, momentum, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = !(self.learning_rate > 0.0)
            || !(self.decay_factor > 0.0 && self.decay_factor <= 1.0)
            || self.decay_period == 0
            || !(0.0..1.0).contains(&self.momentum)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0);
        if bad {
            return Err(Error::InvalidSpec(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_period) as i32)
    }
}

/// Optimizer state for one model.
#[derive(Clone, Debug)]
pub struct Optimizer {
    spec: OptimizerSpec,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, m: Vec::new(), v: Vec::new(), t: 0 })
    }

    /// Applies one update in place. `params` and `grads` align.
    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>], lr: f64) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Array2::zeros(g.dim())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let s = &self.spec;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            match s.kind {
                OptimizerKind::SgdMomentum => {
                    let m = &mut self.m[i];
                    m.zip_mut_with(g, |m, &g| *m = s.momentum * *m + g);
                    p.zip_mut_with(m, |p, &m| *p -= lr * m);
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = (s.beta1, s.beta2);
                    let c1 = 1.0 - b1.powi(self.t);
                    let c2 = 1.0 - b2.powi(self.t);
                    let m = &mut self.m[i];
                    let v = &mut self.v[i];
                    m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
                    v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
                    ndarray::Zip::from(&mut **p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                        *p -= lr * (m / c1) / ((v / c2).sqrt() + s.eps);
                    });
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValMetric {
    /// Negative validation loss.
    #[default]
    NegLoss,
    Accuracy,
    RocAuc,
    RSquared,
}

/// Validation score where larger is better.
pub fn evaluate(model: &Model, d: &Dataset, loss: LossSpec, metric: ValMetric) -> Result<f64> {
    match metric {
        ValMetric::NegLoss => Ok(-loss_value(model, d.x.view(), &d.y, loss)?),
        ValMetric::Accuracy => accuracy(model.predict_values(d.x.view())?.view(), d.y.view()),
        ValMetric::RocAuc => roc_auc(model.predict_column(d.x.view(), 0)?.view(), d.y.view()),
        ValMetric::RSquared => r_squared(model.predict_column(d.x.view(), 0)?.view(), d.y.view()),
    }
}

/// Validation score monitored for early stopping.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopOn {
    #[default]
    Loss,
    Metric,
}

fn default_k() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// References per sample for expected-gradients priors.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub priors: Vec<PriorSpec>,
    /// Stop after this many epochs without validation improvement and
    /// restore the best model.
    #[serde(default)]
    pub patience: Option<usize>,
    #[serde(default)]
    pub stop_on: StopOn,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub alternating: bool,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    pub loss: LossSpec,
    #[serde(default)]
    pub val_metric: ValMetric,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, loss: LossSpec) -> Self {
        Self {
            epochs,
            batch_size,
            k: 1,
            priors: Vec::new(),
            patience: None,
            stop_on: StopOn::Loss,
            seed: 0,
            alternating: false,
            optimizer: OptimizerSpec::default(),
            loss,
            val_metric: ValMetric::default(),
        }
    }

    fn active_priors(&self) -> impl Iterator<Item = (usize, &PriorSpec)> {
        self.priors.iter().enumerate().filter(|(_, p)| p.strength > 0.0)
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidSpec("batch size must be positive".into()));
        }
        self.optimizer.validate()?;
        self.loss.check_head(model)?;
        for p in &self.priors {
            p.validate()?;
        }
        if self.active_priors().any(|(_, p)| p.kind.uses_attributions()) && self.k >= self.batch_size {
            return Err(Error::InvalidK { k: self.k, batch: self.batch_size });
        }
        Ok(())
    }
}

/// Serializes the histories only; the model is exported separately.
#[derive(Clone, Debug, Serialize)]
pub struct TrainResult {
    #[serde(skip)]
    pub model: Model,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_metric: Vec<f64>,
    /// Sum of the unweighted penalties of active priors, averaged over steps.
    pub prior_penalty: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub steps: usize,
    #[serde(skip)]
    pub wall_time: Duration,
}

fn apply_update(model: &mut Model, opt: &mut Optimizer, grads: &[Array2<f64>], lr: f64) {
    let mut biases: Vec<Array2<f64>> =
        model.layers.iter().map(|l| l.biases.clone().insert_axis(Axis(0))).collect();
    {
        let mut refs: Vec<&mut Array2<f64>> = Vec::new();
        for (layer, b) in model.layers.iter_mut().zip(biases.iter_mut()) {
            refs.push(&mut layer.weights);
            refs.push(b);
        }
        opt.step(&mut refs, grads, lr);
    }
    for (layer, b) in model.layers.iter_mut().zip(biases) {
        layer.biases = b.index_axis_move(Axis(0), 0);
    }
}

/// Batches of shuffled row indices. A trailing batch too small for the
/// reference count is merged into the previous one.
fn batches(n: usize, batch_size: usize, min_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[TAG_SHUFFLE, epoch as u64]));
    let mut out: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < min_size) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

/// Which terms one step optimizes.
#[derive(Clone, Copy, PartialEq)]
enum Phase {
    /// Loss plus every active prior.
    Joint,
    /// Loss plus weight penalties only.
    LossOnly,
    /// Attribution priors only, scaled by `ν`.
    PriorOnly(f64),
}

struct StepOut {
    loss: f64,
    penalty: f64,
    objective: f64,
    grads: Vec<Array2<f64>>,
}

fn step_terms<'t>(
    model: &Model,
    params: &Params<'t>,
    cfg: &TrainConfig,
    x: ArrayView2<'_, f64>,
    y: &Array1<f64>,
    rows: &[usize],
    classes: Option<&[usize]>,
    tags: [u64; 2],
    phase: Phase,
) -> Result<(Var<'t>, f64, Var<'t>)> {
    let tape = params.weights[0].tape();
    let dropout_seed = rng::derive_seed(cfg.seed, &[TAG_DROPOUT, tags[0], tags[1]]);
    let out = model.forward(params, tape.leaf(x.to_owned()), Some(dropout_seed))?;
    let loss = mean_loss(&out, y, cfg.loss)?;
    let ctx = PriorContext { model, params, x, y, rows, loss: cfg.loss, k: cfg.k, classes };
    let mut terms = Vec::new();
    let mut raw = 0.0;
    for (i, spec) in cfg.active_priors() {
        let weight_term = !spec.kind.uses_attributions();
        let include = match phase {
            Phase::Joint => true,
            Phase::LossOnly => weight_term,
            Phase::PriorOnly(_) => !weight_term,
        };
        if !include {
            continue;
        }
        let mut r = rng::stream(cfg.seed, &[TAG_EG_TRAIN, tags[0], tags[1], i as u64]);
        let pen = prior_penalty(spec, &ctx, &mut r)?;
        raw += pen.item();
        let scale = match phase {
            Phase::PriorOnly(nu) => nu,
            _ => 1.0,
        };
        terms.push((spec.strength * scale, pen));
    }
    let objective = match phase {
        Phase::PriorOnly(_) => {
            let zero = loss * 0.0;
            compose_objective(zero, &terms)?
        }
        _ => compose_objective(loss, &terms)?,
    };
    Ok((loss, raw, objective))
}

fn one_step(
    model: &Model,
    cfg: &TrainConfig,
    d: &Dataset,
    rows: &[usize],
    tags: [u64; 2],
    phase: Phase,
) -> Result<StepOut> {
    let x = d.x.select(Axis(0), rows);
    let y = d.y.select(Axis(0), rows);
    let classes: Option<Vec<usize>> = (model.n_outputs() > 1).then(|| d.classes()).flatten().map(|c| rows.iter().map(|&r| c[r]).collect());
    let tape = Tape::new();
    let params = model.bind(&tape);
    let (loss, penalty, objective) =
        step_terms(model, &params, cfg, x.view(), &y, rows, classes.as_deref(), tags, phase)?;
    let diverged = |detail: String| Error::Divergence { epoch: tags[0] as usize, step: tags[1] as usize, detail };
    let obj = objective.item();
    if !obj.is_finite() {
        return Err(diverged(format!("objective is {obj}")));
    }
    let ids: Vec<_> = params.all().iter().map(|v| v.id()).collect();
    let grads = tape.grad(objective.id(), &ids)?;
    let grads: Vec<Array2<f64>> = grads.iter().map(|g| tape.value(*g).clone()).collect();
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(diverged("non-finite gradient".into()));
    }
    Ok(StepOut { loss: loss.item(), penalty, objective: obj, grads })
}

struct History {
    result: TrainResult,
    best: Option<(f64, Model)>,
    since_best: usize,
}

impl History {
    fn new(model: &Model) -> Self {
        Self {
            result: TrainResult {
                model: model.clone(),
                train_loss: Vec::new(),
                val_loss: Vec::new(),
                val_metric: Vec::new(),
                prior_penalty: Vec::new(),
                best_epoch: None,
                steps: 0,
                wall_time: Duration::ZERO,
            },
            best: None,
            since_best: 0,
        }
    }

    /// Records an epoch; returns `true` when early stopping triggers.
    fn end_epoch(
        &mut self,
        model: &Model,
        cfg: &TrainConfig,
        val: Option<&Dataset>,
        epoch: usize,
        loss: f64,
        penalty: f64,
    ) -> Result<bool> {
        self.result.train_loss.push(loss);
        self.result.prior_penalty.push(penalty);
        let Some(val) = val else {
            return Ok(false);
        };
        let vl = loss_value(model, val.x.view(), &val.y, cfg.loss)?;
        let vm = evaluate(model, val, cfg.loss, cfg.val_metric)?;
        self.result.val_loss.push(vl);
        self.result.val_metric.push(vm);
        // Lower is better for the monitored score.
        let score = match cfg.stop_on {
            StopOn::Loss => vl,
            StopOn::Metric => -vm,
        };
        if self.best.as_ref().is_none_or(|(b, _)| score < *b) {
            self.best = Some((score, model.clone()));
            self.result.best_epoch = Some(epoch);
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        Ok(cfg.patience.is_some_and(|p| self.since_best >= p))
    }

    fn finish(mut self, model: Model, cfg: &TrainConfig, start: Instant) -> TrainResult {
        self.result.model = match (cfg.patience, self.best) {
            (Some(_), Some((_, best))) => best,
            _ => model,
        };
        self.result.wall_time = start.elapsed();
        self.result
    }
}

/// Minibatch training on the loss plus every active prior.
pub fn train(model: &Model, train_set: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate(model)?;
    let start = Instant::now();
    let mut model = model.clone();
    let mut opt = Optimizer::new(cfg.optimizer.clone())?;
    let mut hist = History::new(&model);
    for epoch in 0..cfg.epochs {
        let lr = cfg.optimizer.lr_at(epoch);
        let (mut loss_sum, mut pen_sum) = (0.0, 0.0);
        let bs = batches(train_set.n(), cfg.batch_size, cfg.k + 1, cfg.seed, epoch);
        for (step, rows) in bs.iter().enumerate() {
            let out = one_step(&model, cfg, train_set, rows, [epoch as u64, step as u64], Phase::Joint)?;
            apply_update(&mut model, &mut opt, &out.grads, lr);
            hist.result.steps += 1;
            loss_sum += out.loss * rows.len() as f64;
            pen_sum += out.penalty;
        }
        let stop =
            hist.end_epoch(&model, cfg, val, epoch, loss_sum / train_set.n() as f64, pen_sum / bs.len() as f64)?;
        if stop {
            break;
        }
    }
    Ok(hist.finish(model, cfg, start))
}

/// Scale of the attribution-prior term during alternating fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Nu {
    Fixed(f64),
    /// Matches the prior term's magnitude to the loss at the first step.
    Auto,
}

#[derive(Clone, Debug, Serialize)]
pub struct FinetuneResult {
    pub result: TrainResult,
    pub nu: f64,
    /// `|ν·Ω| / |L|` on the first fine-tuning batch.
    pub initial_ratio: f64,
    /// Attribution-prior penalty on the full training set before fine-tuning
    /// and after each epoch.
    pub full_penalty: Vec<f64>,
}

/// Full-data value of the attribution priors in `cfg`, with a fixed stream.
pub fn attribution_prior_value(model: &Model, d: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    let rows: Vec<usize> = (0..d.n()).collect();
    let tape = Tape::new();
    let params = model.bind(&tape);
    let classes = (model.n_outputs() > 1).then(|| d.classes()).flatten();
    let ctx = PriorContext {
        model,
        params: &params,
        x: d.x.view(),
        y: &d.y,
        rows: &rows,
        loss: cfg.loss,
        k: cfg.k,
        classes: classes.as_deref(),
    };
    let mut total = 0.0;
    for (i, spec) in cfg.active_priors().filter(|(_, p)| p.kind.uses_attributions()) {
        let mut r = rng::stream(cfg.seed, &[TAG_EG_TRAIN, u64::MAX, i as u64]);
        total += prior_penalty(spec, &ctx, &mut r)?.item();
    }
    Ok(total)
}

/// Alternates, each epoch, one pass on the loss with weight penalties and one
/// pass on `ν` times the attribution priors, sharing optimizer state.
pub fn alternating_finetune(
    model: &Model,
    train_set: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    nu: Nu,
    extra_epochs: usize,
) -> Result<FinetuneResult> {
    cfg.validate(model)?;
    let start = Instant::now();
    let mut model = model.clone();
    let mut opt = Optimizer::new(cfg.optimizer.clone())?;
    let mut hist = History::new(&model);
    let mut full_penalty = vec![attribution_prior_value(&model, train_set, cfg)?];
    let mut nu_value = match nu {
        Nu::Fixed(v) => v,
        Nu::Auto => f64::NAN,
    };
    let mut initial_ratio = f64::NAN;
    for epoch in 0..extra_epochs {
        let lr = cfg.optimizer.lr_at(epoch);
        let (mut loss_sum, mut pen_sum) = (0.0, 0.0);
        let bs = batches(train_set.n(), cfg.batch_size, cfg.k + 1, cfg.seed, epoch);
        for (step, rows) in bs.iter().enumerate() {
            let out = one_step(&model, cfg, train_set, rows, [epoch as u64, 2 * step as u64], Phase::LossOnly)?;
            apply_update(&mut model, &mut opt, &out.grads, lr);
            hist.result.steps += 1;
            loss_sum += out.loss * rows.len() as f64;
        }
        for (step, rows) in bs.iter().enumerate() {
            let tags = [epoch as u64, 2 * step as u64 + 1];
            if nu_value.is_nan() {
                let probe = one_step(&model, cfg, train_set, rows, tags, Phase::PriorOnly(1.0))?;
                let loss_only = one_step(&model, cfg, train_set, rows, tags, Phase::LossOnly)?;
                nu_value = if probe.objective != 0.0 { (loss_only.objective / probe.objective).abs() } else { 1.0 };
            }
            let out = one_step(&model, cfg, train_set, rows, tags, Phase::PriorOnly(nu_value))?;
            if initial_ratio.is_nan() {
                initial_ratio = if out.loss != 0.0 { (out.objective / out.loss).abs() } else { f64::INFINITY };
            }
            apply_update(&mut model, &mut opt, &out.grads, lr);
            hist.result.steps += 1;
            pen_sum += out.penalty;
        }
        full_penalty.push(attribution_prior_value(&model, train_set, cfg)?);
        let stop =
            hist.end_epoch(&model, cfg, val, epoch, loss_sum / train_set.n() as f64, pen_sum / bs.len() as f64)?;
        if stop {
            break;
        }
    }
    if nu_value.is_nan() {
        nu_value = 0.0;
    }
    Ok(FinetuneResult { result: hist.finish(model, cfg, start), nu: nu_value, initial_ratio, full_penalty })
}

/// Outcome of training at one regularization strength.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaReport {
    pub lambda: f64,
    /// Validation score, larger is better.
    pub val_metric: f64,
    /// Prior penalty of the trained model.
    pub penalty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub index: usize,
    /// Set when no positive strength stayed within the slack.
    pub warning: bool,
    pub reports: Vec<LambdaReport>,
}

/// Picks the minimal-penalty strength whose validation score is at least
/// `(1 - slack)` times the unregularized score.
pub fn select_lambda(reports: &[LambdaReport], slack: f64) -> Result<LambdaSelection> {
    if !(0.0..1.0).contains(&slack) {
        return Err(Error::InvalidSpec(format!("slack {slack} must lie in [0, 1)")));
    }
    let base = reports
        .iter()
        .position(|r| r.lambda == 0.0)
        .ok_or_else(|| Error::InvalidSpec("λ grid must contain 0".into()))?;
    let threshold = reports[base].val_metric - slack * reports[base].val_metric.abs();
    let candidates: Vec<usize> = (0..reports.len()).filter(|&i| reports[i].lambda > 0.0).collect();
    let best = candidates
        .iter()
        .copied()
        .filter(|&i| reports[i].val_metric >= threshold)
        .min_by(|&a, &b| reports[a].penalty.total_cmp(&reports[b].penalty).then(b.cmp(&a)));
    let (index, warning) = match best {
        Some(i) => (i, false),
        None => (base, !candidates.is_empty()),
    };
    Ok(LambdaSelection { lambda: reports[index].lambda, index, warning, reports: reports.to_vec() })
}

/// Runs `run` for every strength in the grid (adding 0 if missing) and
/// applies [`select_lambda`].
pub fn lambda_sweep<F>(grid: &[f64], slack: f64, exec: Exec, run: F) -> Result<LambdaSelection>
where
    F: Fn(f64) -> Result<LambdaReport> + Sync,
{
    if grid.is_empty() || grid.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
        return Err(Error::InvalidSpec("λ grid must be nonempty and nonnegative".into()));
    }
    let mut lambdas = grid.to_vec();
    if !lambdas.contains(&0.0) {
        lambdas.insert(0, 0.0);
    }
    let reports = par::try_map_range(exec, lambdas.len(), |i| run(lambdas[i]))?;
    select_lambda(&reports, slack)
}
