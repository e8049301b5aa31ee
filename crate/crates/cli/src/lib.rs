//! Command-line front end: one subcommand per pipeline stage plus `pipeline`
//! to run them all.

pub mod config;
pub mod stages;

use std::ffi::OsString;
use std::path::PathBuf;

use cadenza::attribution::AttributionError;
use cadenza::eval::EvalError;
use cadenza::midi::MidiError;
use cadenza::model::ModelError;
use cadenza::royalty::RoyaltyError;
use cadenza::Exec;
use clap::{Parser, Subcommand};
use serde_json::Value;

pub use config::PipelineConfig;
pub use stages::Context;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing {artifact}: {path} (run the earlier stage first)")]
    Missing { artifact: &'static str, path: PathBuf },
    #[error("bad input: {0}")]
    Input(String),
    #[error(transparent)]
    Midi(#[from] MidiError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Royalty(#[from] RoyaltyError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 for bad invocations and configuration, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cadenza", version, about = "Train a symbolic music model, attribute its output to training works and settle royalties")]
struct Cli {
    /// TOML pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Root seed; replaces `seed` from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. 1 runs everything sequentially.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Write all outputs below this directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse MIDI files into a windowed training corpus and held-out prompts.
    Ingest,
    /// Train the full model and the attribution ensemble.
    Train,
    /// Continue each held-out prompt with the full model.
    Generate,
    /// Score every training work against the generated targets.
    Attribute,
    /// Compare scores with retrained-model influences.
    EvaluateLds {
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        subsets: Option<usize>,
    },
    /// Relate attribution rank to musical similarity.
    EvaluateStyle {
        #[arg(long)]
        buckets: Option<usize>,
    },
    /// Turn revenue, usage and attribution into royalty statements.
    Settle {
        #[arg(long)]
        platform_cut: Option<f64>,
    },
    /// Run every stage in order.
    Pipeline,
}

fn overrides(cli: &Cli) -> Vec<String> {
    let mut out = cli.set.clone();
    if let Some(s) = cli.seed {
        out.push(format!("seed={s}"));
    }
    match &cli.command {
        Command::EvaluateLds { fraction, subsets } => {
            if let Some(f) = fraction {
                out.push(format!("evaluation.fraction={f:?}"));
            }
            if let Some(s) = subsets {
                out.push(format!("evaluation.subsets={s}"));
            }
        }
        Command::EvaluateStyle { buckets: Some(b) } => out.push(format!("evaluation.buckets={b}")),
        Command::Settle { platform_cut: Some(c) } => out.push(format!("royalty.platform_cut={c:?}")),
        _ => {}
    }
    out
}

fn execute(cli: &Cli) -> Result<Value, CliError> {
    let mut config = PipelineConfig::load(cli.config.as_deref(), &overrides(cli))?;
    if let Some(root) = &cli.out {
        config.paths.rebase_outputs(root);
    }
    let exec = match cli.jobs {
        Some(0) => return Err(CliError::Config("--jobs must be positive".into())),
        Some(1) => Exec::Sequential,
        Some(n) => {
            cadenza::exec::set_max_workers(n);
            Exec::default()
        }
        None => Exec::default(),
    };
    let ctx = Context { config, exec };
    match cli.command {
        Command::Ingest => stages::ingest(&ctx),
        Command::Train => stages::train(&ctx),
        Command::Generate => stages::generate_stage(&ctx),
        Command::Attribute => stages::attribute(&ctx),
        Command::EvaluateLds { .. } => stages::evaluate_lds(&ctx),
        Command::EvaluateStyle { .. } => stages::evaluate_style(&ctx),
        Command::Settle { .. } => stages::settle(&ctx),
        Command::Pipeline => stages::pipeline(&ctx),
    }
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
/// The stage summary goes to stdout as JSON; errors go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
