use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use cdemap_core::decomposer::ExampleBank;
use cdemap_core::filter::LinkingRules;
use cdemap_core::pipeline::{PipelineConfig, PipelineContext};
use cdemap_core::provider::wire::{WireConfig, WireEmbeddingProvider, WireLlmProvider};
use cdemap_core::provider::{EmbeddingProvider, HashingEmbedder, HeuristicLlm, LlmProvider};
use cdemap_core::reservoir::Reservoir;
use cdemap_core::retrieval::{PrecomputedEmbeddings, RetrievalIndex};
use cdemap_core::vocab::{expand_synonyms, load_kb_dir, ConceptStore, ExpansionConfig};
use clap::{Args, ValueEnum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderKind {
    /// Offline hashing embedder and heuristic LLM.
    Mock,
    /// Remote endpoints from --provider-config.
    Wire,
}

/// Options shared by every command that builds a pipeline.
#[derive(Debug, Args)]
pub struct ContextArgs {
    /// Directory with concepts.csv, synonyms.csv and relationships.csv.
    #[arg(long)]
    pub kb: PathBuf,
    /// Linking rules (JSON). Built-in defaults when omitted.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Example bank for decomposition prompts (JSON).
    #[arg(long)]
    pub examples: Option<PathBuf>,
    /// Reservoir log. In-memory when omitted.
    #[arg(long)]
    pub reservoir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "mock")]
    pub provider: ProviderKind,
    /// TOML endpoint config for --provider wire.
    #[arg(long)]
    pub provider_config: Option<PathBuf>,
    /// Precomputed dense vectors for the concept index.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

pub fn load_store(kb: &Path) -> Result<Arc<ConceptStore>> {
    let raw = load_kb_dir(kb).with_context(|| format!("loading knowledge base {}", kb.display()))?;
    Ok(Arc::new(expand_synonyms(raw, &ExpansionConfig::default())))
}

pub fn providers(args: &ContextArgs) -> Result<(Arc<dyn EmbeddingProvider>, Arc<dyn LlmProvider>)> {
    match args.provider {
        ProviderKind::Mock => Ok((Arc::new(HashingEmbedder::default()), Arc::new(HeuristicLlm::new()))),
        ProviderKind::Wire => {
            let Some(path) = &args.provider_config else {
                bail!("--provider wire needs --provider-config");
            };
            let config = WireConfig::load(path).map_err(anyhow::Error::msg)?;
            Ok((Arc::new(WireEmbeddingProvider::new(&config)), Arc::new(WireLlmProvider::new(&config))))
        }
    }
}

pub fn build(args: &ContextArgs, config: PipelineConfig) -> Result<PipelineContext> {
    let store = load_store(&args.kb)?;
    let (embedder, llm) = providers(args)?;
    let rules = match &args.rules {
        Some(path) => {
            let rules = LinkingRules::load(path)?;
            rules.validate(&store)?;
            rules
        }
        None => {
            // the built-in routes name vocabularies a small KB may lack
            let rules = LinkingRules::default();
            if let Err(e) = rules.validate(&store) {
                tracing::warn!(error = %e, "default linking rules do not fully match the knowledge base");
            }
            rules
        }
    };
    let bank = match &args.examples {
        Some(path) => ExampleBank::load(path, &*embedder)?,
        None => ExampleBank::default(),
    };
    let reservoir = match &args.reservoir {
        Some(path) => Reservoir::open(path, store.clone())?,
        None => Reservoir::in_memory(store.clone()),
    };
    let index = match &args.embeddings {
        Some(path) => {
            let pre = PrecomputedEmbeddings::load(path)?;
            RetrievalIndex::build_with_precomputed(&store, &*embedder, &pre)?
        }
        None => RetrievalIndex::build(&store, &*embedder)?,
    };
    Ok(PipelineContext {
        store,
        index: Arc::new(index),
        embedder,
        llm,
        bank: Arc::new(bank),
        rules: Arc::new(rules),
        reservoir: Arc::new(reservoir),
        config,
    })
}
