use std::fs;
use std::path::{Path, PathBuf};

use attriprior::attrib::{global_mean_abs, grad_attrib, integrated_gradients_matrix, AttributionMatrix, Target};
use attriprior::bench::write_table_csv;
use attriprior::data::{write_csv, write_edge_list, Task};
use attriprior::eval::write_lorenz_csv;
use attriprior::experiments::{
    aggregate, build_model, eg_attributions, explain_rows, prepare, resolve_priors, run_experiment, test_metric_kind,
    train_config, AggregateReport, ExperimentConfig, ExperimentKind, Prepared,
};
use attriprior::nn::Model;
use attriprior::par::{self, Exec};
use attriprior::train::{evaluate, train as fit, TrainResult};
use attriprior::Error;
use ndarray::Array1;
use serde::Serialize;

use crate::output::{read_replicates, replicate_path, write_json, AggregateFile, ReplicateFile};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidSpec(_) | Error::Split(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

pub struct Context {
    pub cfg: ExperimentConfig,
    pub jobs: usize,
    pub exec: Exec,
    pub out: PathBuf,
}

impl Context {
    pub fn load(path: &Path, seed: Option<u64>, jobs: Option<usize>, out: Option<PathBuf>) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg =
            ExperimentConfig::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        let jobs = match jobs {
            Some(0) => return Err(CliError::Config("--jobs must be at least 1".into())),
            Some(j) => j,
            None => std::thread::available_parallelism().map_or(1, |n| n.get()),
        };
        let exec = if jobs == 1 { Exec::Sequential } else { Exec::Parallel };
        let out = out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
        Ok(Context { cfg, jobs, exec, out })
    }

    /// Runs `f` on a pool of `jobs` threads. `report` only reads existing
    /// output, so the directory is created for the other commands alone.
    pub fn run(&self, f: fn(&Context) -> Result<(), CliError>, create_out: bool) -> Result<(), CliError> {
        if create_out {
            fs::create_dir_all(&self.out).map_err(|e| io_err(&self.out, e))?;
        }
        par::install(self.jobs, || f(self))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Seed of single-run commands: the first replicate's.
    fn seed(&self) -> u64 {
        self.cfg.replicate_seed(0)
    }
}

#[derive(Serialize)]
struct GenDataSummary<'a> {
    config: &'a ExperimentConfig,
    seed: u64,
    task: Task,
    n: usize,
    p: usize,
    train: usize,
    val: usize,
    test: usize,
    graph_edges: Option<usize>,
}

pub fn gen_data(ctx: &Context) -> Result<(), CliError> {
    let seed = ctx.seed();
    let (data, _) = ctx.cfg.dataset.generate(seed)?;
    write_csv(&data, &ctx.path("data.csv"))?;
    let d = prepare(&ctx.cfg, seed)?;
    write_csv(&d.train, &ctx.path("train.csv"))?;
    if let Some(val) = &d.val {
        write_csv(val, &ctx.path("val.csv"))?;
    }
    write_csv(&d.test, &ctx.path("test.csv"))?;
    if let Some(g) = &d.graph {
        write_edge_list(g, &ctx.path("graph.csv"))?;
    }
    let summary = GenDataSummary {
        config: &ctx.cfg,
        seed,
        task: data.task,
        n: data.n(),
        p: data.p(),
        train: d.train.n(),
        val: d.val.as_ref().map_or(0, |v| v.n()),
        test: d.test.n(),
        graph_edges: d
            .graph
            .as_ref()
            .map(|g| g.adjacency().indexed_iter().filter(|&((i, j), &v)| i < j && v != 0.0).count()),
    };
    write_json(&ctx.path("gen-data.json"), &summary)?;
    println!("wrote {} rows to {}", data.n(), ctx.out.display());
    Ok(())
}

struct Trained {
    data: Prepared,
    model: Model,
    result: TrainResult,
    test_metric: f64,
}

fn train_one(ctx: &Context, seed: u64) -> Result<Trained, CliError> {
    let data = prepare(&ctx.cfg, seed)?;
    let model = build_model(&ctx.cfg, &data, seed)?;
    let priors = resolve_priors(&ctx.cfg.priors, data.graph.as_ref())?;
    let tc = train_config(&ctx.cfg, data.train.task, seed, priors);
    let result = fit(&model, &data.train, data.val.as_ref(), &tc)?;
    let model = result.model.clone();
    let test_metric = evaluate(&model, &data.test, tc.loss, test_metric_kind(data.test.task))?;
    Ok(Trained { data, model, result, test_metric })
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config: &'a ExperimentConfig,
    seed: u64,
    test_metric: f64,
    history: &'a TrainResult,
}

pub fn train(ctx: &Context) -> Result<(), CliError> {
    let seed = ctx.seed();
    let t = train_one(ctx, seed)?;
    let model_path = ctx.path("model.json");
    let mut text = t.model.to_json()?;
    text.push('\n');
    fs::write(&model_path, text).map_err(|e| io_err(&model_path, e))?;
    write_json(
        &ctx.path("train.json"),
        &TrainSummary { config: &ctx.cfg, seed, test_metric: t.test_metric, history: &t.result },
    )?;
    println!("test metric {:.6}", t.test_metric);
    Ok(())
}

#[derive(Serialize)]
struct MethodSummary {
    method: String,
    file: String,
    global_mean_abs: Vec<f64>,
}

#[derive(Serialize)]
struct AttributeSummary<'a> {
    config: &'a ExperimentConfig,
    seed: u64,
    test_metric: f64,
    rows: usize,
    methods: Vec<MethodSummary>,
}

pub fn attribute(ctx: &Context) -> Result<(), CliError> {
    let seed = ctx.seed();
    let t = train_one(ctx, seed)?;
    let x = explain_rows(&ctx.cfg, &t.data.test);
    let target = match (t.model.n_outputs() > 1, x.classes()) {
        (true, Some(c)) => Target::PerSample(c),
        _ => Target::First,
    };
    let eg = eg_attributions(&ctx.cfg, &t.model, &t.data.train, &x, seed, ctx.exec)?;
    let ig = integrated_gradients_matrix(
        &t.model,
        x.x.view(),
        Array1::zeros(x.p()).view(),
        ctx.cfg.attribution.ig_steps,
        &target,
        ctx.exec,
    )?;
    let grad = grad_attrib(&t.model, x.x.view(), &target)?;
    let mut methods = Vec::new();
    for (name, phi) in [("eg", &eg), ("ig", &ig), ("grad", &grad)] {
        methods.push(write_attributions(ctx, name, phi, x.grid)?);
    }
    write_json(
        &ctx.path("attribute.json"),
        &AttributeSummary { config: &ctx.cfg, seed, test_metric: t.test_metric, rows: x.n(), methods },
    )?;
    println!("attributed {} rows to {}", x.n(), ctx.out.display());
    Ok(())
}

fn write_attributions(
    ctx: &Context,
    name: &str,
    phi: &AttributionMatrix,
    grid: Option<(usize, usize)>,
) -> Result<MethodSummary, CliError> {
    let file = format!("attributions_{name}.csv");
    phi.write_csv(&ctx.path(&file))?;
    if let Some(g) = grid {
        phi.write_grid_csvs(&ctx.path(&format!("attributions_{name}")), g)?;
    }
    Ok(MethodSummary { method: phi.method.label().to_string(), file, global_mean_abs: global_mean_abs(phi)?.0.to_vec() })
}

pub fn benchmark(ctx: &Context) -> Result<(), CliError> {
    if ctx.cfg.experiment != ExperimentKind::Benchmark {
        return Err(CliError::Config(format!(
            "benchmark needs a benchmark config, got {:?} (use `experiment`)",
            ctx.cfg.experiment
        )));
    }
    experiment(ctx)
}

pub fn experiment(ctx: &Context) -> Result<(), CliError> {
    let (reports, agg) = run_experiment(&ctx.cfg, ctx.exec)?;
    for (r, report) in reports.into_iter().enumerate() {
        let file = ReplicateFile { config: ctx.cfg.clone(), replicate: r, replicate_seed: ctx.cfg.replicate_seed(r), report };
        write_json(&replicate_path(&ctx.out, r), &file)?;
    }
    write_aggregate(ctx, agg)?;
    println!("{} replicates written to {}", ctx.cfg.replicates, ctx.out.display());
    Ok(())
}

/// Rebuilds the aggregate from the replicate files in the output directory.
pub fn report(ctx: &Context) -> Result<(), CliError> {
    let files = read_replicates(&ctx.out)?;
    if files.len() != ctx.cfg.replicates {
        return Err(CliError::Runtime(format!(
            "found {} replicate files in {}, config expects {}",
            files.len(),
            ctx.out.display(),
            ctx.cfg.replicates
        )));
    }
    for (r, f) in files.iter().enumerate() {
        if f.config != ctx.cfg {
            return Err(CliError::Config(format!("replicate {r} was produced by a different config or seed")));
        }
        if f.replicate != r || f.replicate_seed != ctx.cfg.replicate_seed(r) {
            return Err(CliError::Runtime(format!("replicate file {r} has index {} and seed {}", f.replicate, f.replicate_seed)));
        }
    }
    let reports: Vec<_> = files.into_iter().map(|f| f.report).collect();
    let agg = aggregate(&ctx.cfg, &reports)?;
    write_aggregate(ctx, agg)?;
    println!("aggregated {} replicates in {}", reports.len(), ctx.out.display());
    Ok(())
}

fn write_aggregate(ctx: &Context, report: AggregateReport) -> Result<(), CliError> {
    match &report {
        AggregateReport::Benchmark(a) => write_table_csv(&a.mean_results, &ctx.path("benchmark.csv"))?,
        AggregateReport::Sparse(a) => {
            write_lorenz_csv(&a.lorenz_base, &ctx.path("lorenz_base.csv"))?;
            write_lorenz_csv(&a.lorenz_prior, &ctx.path("lorenz_prior.csv"))?;
        }
        AggregateReport::Image(a) => {
            a.base.write_csv(&ctx.path("robustness_base.csv"))?;
            a.prior.write_csv(&ctx.path("robustness_prior.csv"))?;
        }
        AggregateReport::Graph(_) | AggregateReport::Custom(_) => {}
    }
    let replicate_seeds = (0..ctx.cfg.replicates).map(|r| ctx.cfg.replicate_seed(r)).collect();
    write_json(&ctx.path("aggregate.json"), &AggregateFile { config: ctx.cfg.clone(), replicate_seeds, report })
}
