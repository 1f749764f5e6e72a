//! `cdemap`: map data dictionaries to vocabulary concepts, score the
//! output, inspect the review reservoir and run the HTTP service.

mod setup;

use std::io::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use cdemap_core::decomposer::load_dictionary;
use cdemap_core::eval::{evaluate, load_gold};
use cdemap_core::pipeline::{map_dictionary, results_from_json, results_to_json, PipelineConfig};
use cdemap_core::reranker::RerankConfig;
use cdemap_core::reservoir::Reservoir;
use cdemap_core::retrieval::{PrecomputedEmbeddings, RetrievalIndex};
use cdemap_service::ServiceConfig;
use clap::{Parser, Subcommand, ValueEnum};
use setup::ContextArgs;

#[derive(Debug, Parser)]
#[command(name = "cdemap", version, about = "Link data-dictionary variables to controlled-vocabulary concepts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Map a data dictionary (CSV or JSON) and write results as JSON.
    Map(MapArgs),
    /// Score mapping results against a gold table.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Export approved reservoir mappings.
    Export(ExportArgs),
    /// Write precomputed dense vectors for a knowledge base.
    Index(IndexArgs),
}

#[derive(Debug, clap::Args)]
struct MapArgs {
    #[arg(long)]
    dict: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    context: ContextArgs,
    /// Candidates per retriever.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Similarity threshold of the knowledge filter.
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    /// Self-consistency rounds.
    #[arg(long, default_value_t = 3)]
    n: u32,
    /// Vote threshold on the 1-10 relevance scale.
    #[arg(long, default_value_t = 8)]
    t: u8,
    /// Minimum confidence for a reranked match.
    #[arg(long = "tau-rel", default_value_t = 0.85)]
    tau_rel: f64,
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    /// Attach per-component traces (needed by `eval`).
    #[arg(long)]
    trace: bool,
}

#[derive(Debug, clap::Args)]
struct EvalArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,10")]
    k: Vec<usize>,
    /// Print the report as JSON instead of tables.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, clap::Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[command(flatten)]
    context: ContextArgs,
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    /// Static review UI assets, served under /ui.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExportFormat {
    Ntriples,
    Json,
}

#[derive(Debug, clap::Args)]
struct ExportArgs {
    #[arg(long)]
    reservoir: PathBuf,
    #[arg(long)]
    kb: PathBuf,
    #[arg(long, value_enum, default_value = "ntriples")]
    format: ExportFormat,
}

#[derive(Debug, clap::Args)]
struct IndexArgs {
    #[arg(long)]
    kb: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .init();
    match Cli::parse().command {
        Command::Map(args) => map(args),
        Command::Eval(args) => eval(args),
        Command::Serve(args) => serve(args),
        Command::Export(args) => export(args),
        Command::Index(args) => index(args),
    }
}

fn map(args: MapArgs) -> Result<()> {
    let rerank = RerankConfig { n: args.n, t: args.t, tau_rel: args.tau_rel, ..RerankConfig::default() };
    rerank.validate()?;
    if !(0.0..=1.0).contains(&args.tau) {
        bail!("--tau must be within [0, 1]");
    }
    let config = PipelineConfig { k: args.k, tau: args.tau, rerank, trace: args.trace, ..PipelineConfig::default() };
    let entries = load_dictionary(&args.dict)?;
    let ctx = setup::build(&args.context, config)?;
    let results = map_dictionary(&entries, &ctx, args.parallelism, None);
    std::fs::write(&args.out, results_to_json(&results)).with_context(|| format!("writing {}", args.out.display()))?;
    let na = results.iter().filter(|r| r.component_results.is_na()).count();
    eprintln!("mapped {} entries ({na} NA) -> {}", results.len(), args.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.results).with_context(|| format!("reading {}", args.results.display()))?;
    let results = results_from_json(&text).context("parsing results")?;
    let gold = load_gold(&args.gold)?;
    let report = evaluate(&results, &gold, &args.k)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let ctx = setup::build(&args.context, PipelineConfig::default())?;
    let config = ServiceConfig {
        parallelism: args.parallelism,
        rules_path: args.context.rules.clone(),
        ui_dir: args.ui_dir.clone(),
    };
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind((args.host.as_str(), args.port)).await?;
        let addr = listener.local_addr()?;
        println!("listening on http://{addr}");
        std::io::stdout().flush()?;
        tracing::info!(%addr, "service started");
        cdemap_service::serve(listener, cdemap_service::router(ctx, config)).await?;
        Ok(())
    })
}

fn export(args: ExportArgs) -> Result<()> {
    if !args.reservoir.exists() {
        bail!("no reservoir log at {}", args.reservoir.display());
    }
    let store = setup::load_store(&args.kb)?;
    let reservoir = Reservoir::open(&args.reservoir, store)?;
    let mut out = std::io::stdout().lock();
    match args.format {
        ExportFormat::Ntriples => {
            for t in reservoir.export_all_triples() {
                writeln!(out, "{}", t.to_ntriples())?;
            }
        }
        ExportFormat::Json => {
            writeln!(out, "{}", serde_json::to_string_pretty(&reservoir.export_dictionary())?)?;
        }
    }
    Ok(())
}

fn index(args: IndexArgs) -> Result<()> {
    let store = setup::load_store(&args.kb)?;
    let embedder = cdemap_core::provider::HashingEmbedder::default();
    let index = RetrievalIndex::build(&store, &embedder)?;
    std::fs::write(&args.out, PrecomputedEmbeddings::from_index(&index).to_text()?)?;
    eprintln!("wrote {} vectors -> {}", index.len(), args.out.display());
    Ok(())
}
