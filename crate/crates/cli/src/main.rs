mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gptrec::data::InputFormat;
use gptrec::generate::Strategy;

use crate::config::{RunConfig, TokenModeSetting};

/// Failure classes with distinct exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configuration or missing inputs (exit 2).
    Usage(String),
    /// Everything that goes wrong once work has started (exit 1).
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "gptrec", version, about = "Generative sequential recommendation pipeline")]
struct Cli {
    /// JSON run configuration; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random component.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override any config value: --set section.field=value (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse an interaction log into a dataset cache and print its summary.
    Prepare(PrepareArgs),
    /// Build the item tokenisation (SVD sub-item tokens or one token per item).
    Tokenise(TokeniseArgs),
    /// Train the decoder with validation early stopping.
    Train(TrainArgs),
    /// Emit recommendations as user, rank, item, score rows.
    Recommend(RecommendArgs),
    /// Leave-one-out Recall@K / NDCG@K on the test targets.
    Evaluate(EvaluateArgs),
    /// NDCG@K of Top-K and Next-K for K = 1..max.
    Sweep(SweepArgs),
    /// Embedding-table memory of one-token versus sub-item tokenisation.
    MemoryReport(MemoryReportArgs),
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// Interaction log (relative paths resolve against GPTREC_DATA_ROOT).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_parser = parse_format)]
    format: Option<InputFormat>,
    #[arg(long)]
    min_user_interactions: Option<usize>,
    #[arg(long)]
    min_item_interactions: Option<usize>,
    /// Skip malformed lines instead of failing.
    #[arg(long)]
    lenient: bool,
    /// Rebuild even when the cache matches the input.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct TokeniseArgs {
    #[arg(long, value_parser = parse_mode)]
    mode: Option<TokenModeSetting>,
    #[arg(long, short = 't')]
    tokens_per_item: Option<usize>,
    #[arg(long)]
    values_per_token: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct RecommendArgs {
    /// Raw user ids; all users when omitted.
    #[arg(long = "user")]
    users: Vec<u64>,
    #[arg(long, short)]
    k: Option<usize>,
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Write rows here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Comma separated cutoffs.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    max_k: Option<usize>,
}

#[derive(Args, Debug)]
struct MemoryReportArgs {
    /// NAME=ITEMS; replaces the reference datasets (repeatable).
    #[arg(long = "dataset", value_name = "NAME=ITEMS")]
    datasets: Vec<String>,
    /// T:V; replaces the reference configurations (repeatable).
    #[arg(long = "tv", value_name = "T:V")]
    configs: Vec<String>,
    #[arg(long, default_value_t = 256)]
    embed_dim: u64,
    #[arg(long, default_value_t = 4)]
    bytes_per_value: u64,
    /// CSV instead of the aligned table.
    #[arg(long)]
    csv: bool,
}

fn parse_format(s: &str) -> Result<InputFormat, String> {
    match s {
        "double-colon" | "movielens" => Ok(InputFormat::DoubleColon),
        "delimited" | "csv" | "tsv" => Ok(InputFormat::Delimited),
        _ => Err(format!("unknown format `{s}` (double-colon, delimited)")),
    }
}

fn parse_mode(s: &str) -> Result<TokenModeSetting, String> {
    match s {
        "one-token" | "one_token" => Ok(TokenModeSetting::OneToken),
        "multi-token" | "multi_token" => Ok(TokenModeSetting::MultiToken),
        _ => Err(format!("unknown mode `{s}` (one-token, multi-token)")),
    }
}

fn build_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    // an existing run directory carries its own configuration forward
    if cli.config.is_none() {
        if let Some(prev) = manifest::last_config(&cfg.out)? {
            cfg = prev;
        }
    }
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    for s in &cli.sets {
        cfg.set_path(s)?;
    }
    match &cli.command {
        Command::Prepare(a) => {
            if let Some(i) = &a.input {
                cfg.data.input = Some(i.clone());
            }
            if let Some(f) = a.format {
                cfg.data.format = f;
            }
            if let Some(n) = a.min_user_interactions {
                cfg.data.min_user_interactions = n;
            }
            if let Some(n) = a.min_item_interactions {
                cfg.data.min_item_interactions = n;
            }
            cfg.data.lenient |= a.lenient;
        }
        Command::Tokenise(a) => {
            if let Some(m) = a.mode {
                cfg.tokeniser.mode = m;
            }
            if let Some(t) = a.tokens_per_item {
                cfg.tokeniser.tokens_per_item = t;
                cfg.tokeniser.mode = TokenModeSetting::MultiToken;
            }
            if let Some(v) = a.values_per_token {
                cfg.tokeniser.values_per_token = v;
                cfg.tokeniser.mode = TokenModeSetting::MultiToken;
            }
        }
        Command::Train(a) => {
            if let Some(e) = a.epochs {
                cfg.train.max_epochs = e;
            }
            if let Some(p) = a.patience {
                cfg.train.patience_epochs = p;
            }
            if let Some(b) = a.batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(lr) = a.lr {
                cfg.train.learning_rate = lr;
            }
        }
        Command::Recommend(a) => {
            if let Some(k) = a.k {
                cfg.generation.k = k;
            }
            if let Some(s) = a.strategy {
                cfg.generation.strategy = s;
            }
        }
        Command::Evaluate(a) => {
            if let Some(s) = a.strategy {
                cfg.generation.strategy = s;
            }
            if let Some(ks) = &a.ks {
                cfg.generation.ks = ks.clone();
            }
        }
        Command::Sweep(a) => {
            if let Some(k) = a.max_k {
                cfg.generation.sweep_max_k = k;
            }
        }
        Command::MemoryReport(_) => {}
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    if let Command::MemoryReport(a) = &cli.command {
        return commands::memory_report(&a.datasets, &a.configs, a.embed_dim, a.bytes_per_value, a.csv);
    }
    let cfg = build_config(&cli)?;
    match &cli.command {
        Command::Prepare(a) => commands::prepare(&cfg, a.force),
        Command::Tokenise(_) => commands::tokenise(&cfg),
        Command::Train(_) => commands::train(&cfg),
        Command::Recommend(a) => commands::recommend(&cfg, &a.users, a.output.as_deref()),
        Command::Evaluate(_) => commands::evaluate(&cfg),
        Command::Sweep(_) => commands::sweep(&cfg),
        Command::MemoryReport(_) => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
