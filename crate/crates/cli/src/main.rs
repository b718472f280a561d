//! `sidrec` — semantic-ID generative retrieval, end to end.
//!
//! Typical flow within one output directory:
//!
//! ```text
//! sidrec synth    --config run.toml --out work
//! sidrec tokenize --config run.toml --out work
//! sidrec train    --config run.toml --out work
//! sidrec eval     --config run.toml --out work
//! sidrec sweep    --config run.toml --out work
//! sidrec ablate   --config run.toml --out work
//! ```
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sidrec_core::error::Error;

use commands::Ctx;
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "sidrec",
    version,
    about = "Semantic-ID generative retrieval with reward-guided beam search"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic hierarchical-preference dataset.
    Synth(CommonArgs),
    /// Fit the residual k-means codebook and emit the item-path map.
    Tokenize(CommonArgs),
    /// Train the generative model jointly with the path-reward head.
    Train(CommonArgs),
    /// Evaluate standard and reward-guided retrieval on the test split.
    Eval(CommonArgs),
    /// Scaling sweep over candidate widths at fixed decoder budget.
    Sweep(CommonArgs),
    /// Per-depth reward-flag ablation grid.
    Ablate(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Top-level seed; every component derives a named sub-seed from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts and the resolved-config snapshot.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Parallel evaluation workers (results are identical for any count).
    #[arg(long)]
    workers: Option<usize>,
    /// Override any config leaf, e.g. --set model.d_h=128.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn build_ctx(args: &CommonArgs) -> Result<Ctx, Error> {
    let mut config = RunConfig::load(args.config.as_deref(), &args.set)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(workers) = args.workers {
        config.workers = workers;
    }
    let workers = config.workers.max(1);
    Ok(Ctx {
        config,
        out: args.out.clone(),
        workers,
    })
}

fn run(command: &Command) -> Result<(), Error> {
    match command {
        Command::Synth(args) => commands::cmd_synth(&build_ctx(args)?),
        Command::Tokenize(args) => commands::cmd_tokenize(&build_ctx(args)?),
        Command::Train(args) => commands::cmd_train(&build_ctx(args)?),
        Command::Eval(args) => commands::cmd_eval(&build_ctx(args)?),
        Command::Sweep(args) => commands::cmd_sweep(&build_ctx(args)?),
        Command::Ablate(args) => commands::cmd_ablate(&build_ctx(args)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err {
                Error::Config(_) | Error::Usage(_) | Error::ShapeMismatch { .. } => 2,
                Error::Data(_) | Error::Io(_) => 3,
                Error::Numeric(_) => 4,
            };
            ExitCode::from(code)
        }
    }
}
