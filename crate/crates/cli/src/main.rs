use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod output;

use commands::{CliError, Context};

type Run = fn(&Context) -> Result<(), CliError>;

/// Attribution priors: data generation, training, attribution, benchmarks
/// and replicated experiments driven by JSON configs.
#[derive(Parser, Debug)]
#[command(name = "attriprior", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 runs everything on the calling thread.
    #[arg(long, env = "ATTRIPRIOR_JOBS")]
    jobs: Option<usize>,
    /// Output directory; defaults to the config's output_dir, then `out`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the configured dataset and its split as CSV files.
    GenData(Common),
    /// Train one model with the configured priors.
    Train(Common),
    /// Train one model and write EG, IG and gradient attributions of the test rows.
    Attribute(Common),
    /// Run a benchmark config and write the 18-metric table.
    Benchmark(Common),
    /// Run every replicate of an experiment and aggregate them.
    Experiment(Common),
    /// Recompute the aggregate report from per-replicate files.
    Report(Common),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (run, common, create_out): (Run, Common, bool) = match cli.command {
        Command::GenData(c) => (commands::gen_data, c, true),
        Command::Train(c) => (commands::train, c, true),
        Command::Attribute(c) => (commands::attribute, c, true),
        Command::Benchmark(c) => (commands::benchmark, c, true),
        Command::Experiment(c) => (commands::experiment, c, true),
        Command::Report(c) => (commands::report, c, false),
    };
    let result =
        Context::load(&common.config, common.seed, common.jobs, common.out).and_then(|ctx| ctx.run(run, create_out));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
