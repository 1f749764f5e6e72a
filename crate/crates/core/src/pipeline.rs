//! End-to-end mapping of data-dictionary entries.
//!
//! Per entry: validate, decompose, then link every component on its own.
//! Per component the stages run in a fixed order: reservoir lookup, merged
//! retrieval, linking rules, similarity filter, exact match among the
//! survivors, otherwise self-consistency reranking. Exact and reranked
//! matches go through the judge and, unless judged incorrect, into the
//! review queue. Failures never abort a batch; they become `NA` outcomes
//! with the error kept in the trace.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::decomposer::{
    decompose, validate_input, Component, ComponentKind, DataDictionaryEntry, DecomposeOptions,
    DecomposedQuery, ExampleBank,
};
use crate::filter::{
    apply_linking_rules, filter_by_similarity, route_preference, LinkingRules, DEFAULT_TAU,
};
use crate::provider::{EmbeddingProvider, LlmProvider};
use crate::reranker::{self, self_consistency, select_top, MatchDecision, RerankConfig};
use crate::reservoir::{
    judge, ConceptRef, EnqueueRequest, Judgement, Reservoir, ReviewCandidate, ReviewContext,
};
use crate::retrieval::{Candidate, RetrievalError, RetrievalIndex, DEFAULT_TOP_K};
use crate::vocab::{ConceptStore, OmopId};

/// Domain hint used for unit components.
pub const UNIT_DOMAIN: &str = "Unit";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Candidates per retriever.
    pub k: usize,
    /// Similarity threshold of the knowledge filter.
    pub tau: f64,
    pub rerank: RerankConfig,
    /// In-context examples per decomposition prompt.
    pub examples: usize,
    pub decompose_retries: u32,
    /// Attach traces to results.
    pub trace: bool,
    /// Record stage durations in traces. Off by default so output stays
    /// byte-stable.
    pub timings: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_TOP_K,
            tau: DEFAULT_TAU,
            rerank: RerankConfig::default(),
            examples: 3,
            decompose_retries: 2,
            trace: false,
            timings: false,
        }
    }
}

/// Everything a mapping run needs. Cheap to clone.
#[derive(Clone)]
pub struct PipelineContext {
    pub store: Arc<ConceptStore>,
    pub index: Arc<RetrievalIndex>,
    pub embedder: Arc<dyn EmbeddingProvider>,
    pub llm: Arc<dyn LlmProvider>,
    pub bank: Arc<ExampleBank>,
    pub rules: Arc<LinkingRules>,
    pub reservoir: Arc<Reservoir>,
    pub config: PipelineConfig,
}

impl PipelineContext {
    /// Builds the retrieval index over `store` and bundles everything.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: Arc<ConceptStore>,
        embedder: Arc<dyn EmbeddingProvider>,
        llm: Arc<dyn LlmProvider>,
        bank: Arc<ExampleBank>,
        rules: Arc<LinkingRules>,
        reservoir: Arc<Reservoir>,
        config: PipelineConfig,
    ) -> Result<Self, RetrievalError> {
        let index = Arc::new(RetrievalIndex::build(&store, &*embedder)?);
        Ok(Self { store, index, embedder, llm, bank, rules, reservoir, config })
    }

    /// Same context with another LLM.
    pub fn with_llm(&self, llm: Arc<dyn LlmProvider>) -> Self {
        Self { llm, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ComponentOutcome {
    ExactMatch { omop_id: OmopId },
    Reranked { omop_id: OmopId, confidence: f64 },
    ReservoirHit { concepts: Vec<ConceptRef> },
    Na,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeStatus {
    ExactMatch,
    Reranked,
    ReservoirHit,
    Na,
}

/// Serialized form of one component's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentResult {
    pub text: String,
    pub kind: ComponentKind,
    pub status: OutcomeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omop_id: Option<OmopId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    /// Every concept of a reservoir hit.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub concepts: Vec<ConceptRef>,
}

impl ComponentResult {
    fn new(component: &Component, outcome: &ComponentOutcome, store: &ConceptStore) -> Self {
        let (status, omop_id, confidence, concepts) = match outcome {
            ComponentOutcome::ExactMatch { omop_id } => {
                (OutcomeStatus::ExactMatch, Some(*omop_id), None, Vec::new())
            }
            ComponentOutcome::Reranked { omop_id, confidence } => {
                (OutcomeStatus::Reranked, Some(*omop_id), Some(*confidence), Vec::new())
            }
            ComponentOutcome::ReservoirHit { concepts } => (
                OutcomeStatus::ReservoirHit,
                concepts.first().map(|c| c.omop_id),
                None,
                concepts.clone(),
            ),
            ComponentOutcome::Na => (OutcomeStatus::Na, None, None, Vec::new()),
        };
        let concept = omop_id.and_then(|id| store.get(id));
        Self {
            text: component.text.clone(),
            kind: component.kind,
            status,
            omop_id,
            code: concept.map(|c| c.code.clone()),
            vocabulary: concept.map(|c| c.vocabulary.clone()),
            concept_name: concept.map(|c| c.name.clone()),
            confidence,
            concepts,
        }
    }
}

/// Component outcomes keyed by component name, or the literal `"NA"` when
/// the entry could not be decomposed.
#[derive(Debug, Clone, PartialEq)]
pub enum ComponentResults {
    Na,
    Mapped(IndexMap<String, ComponentResult>),
}

impl ComponentResults {
    pub fn get(&self, name: &str) -> Option<&ComponentResult> {
        match self {
            ComponentResults::Na => None,
            ComponentResults::Mapped(m) => m.get(name),
        }
    }

    pub fn is_na(&self) -> bool {
        matches!(self, ComponentResults::Na)
    }

    pub fn len(&self) -> usize {
        match self {
            ComponentResults::Na => 0,
            ComponentResults::Mapped(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ComponentResult)> {
        let map = match self {
            ComponentResults::Na => None,
            ComponentResults::Mapped(m) => Some(m),
        };
        map.into_iter().flat_map(|m| m.iter())
    }
}

impl Serialize for ComponentResults {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ComponentResults::Na => s.serialize_str("NA"),
            ComponentResults::Mapped(m) => m.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for ComponentResults {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Literal(String),
            Mapped(IndexMap<String, ComponentResult>),
        }
        match Raw::deserialize(d)? {
            Raw::Literal(s) if s == "NA" => Ok(ComponentResults::Na),
            Raw::Literal(s) => Err(serde::de::Error::custom(format!("expected \"NA\", got {s:?}"))),
            Raw::Mapped(m) => Ok(ComponentResults::Mapped(m)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Reservoir,
    Retrieval,
    LinkingRules,
    SimilarityFilter,
    ExactMatch,
    Rerank,
    Judge,
    Enqueue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub seq: u32,
    pub stage: Stage,
    /// Candidates (or concepts) coming out of the stage.
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_us: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub omop_id: OmopId,
    pub relevance_scores: Vec<u8>,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentTrace {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_hint: Option<String>,
    pub stages: Vec<StageRecord>,
    pub rerank_calls: u32,
    pub judge_calls: u32,
    /// Merged retrieval order.
    #[serde(default)]
    pub retrieved: Vec<OmopId>,
    /// Post-filter order.
    #[serde(default)]
    pub survivors: Vec<OmopId>,
    /// Final ranking used for evaluation.
    #[serde(default)]
    pub ranking: Vec<OmopId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scores: Vec<ScoreSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judgement: Option<Judgement>,
    #[serde(default)]
    pub queued_for_review: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EntryTrace {
    pub decompose_attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub components: IndexMap<String, ComponentTrace>,
}

impl EntryTrace {
    pub fn rerank_calls(&self) -> u32 {
        self.components.values().map(|c| c.rerank_calls).sum()
    }

    pub fn judge_calls(&self) -> u32 {
        self.components.values().map(|c| c.judge_calls).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingResult {
    pub name: String,
    pub label: String,
    pub decomposition: Option<DecomposedQuery>,
    pub component_results: ComponentResults,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<EntryTrace>,
}

/// What a component knows about the entry it came from.
pub struct EntryScope<'a> {
    pub entry: &'a DataDictionaryEntry,
    pub decomposition: Option<&'a DecomposedQuery>,
    pub component: &'a str,
}

struct Tracer {
    trace: ComponentTrace,
    timings: bool,
    seq: u32,
}

impl Tracer {
    fn stage(&mut self, stage: Stage, count: usize, started: Instant) {
        self.trace.stages.push(StageRecord {
            seq: self.seq,
            stage,
            count,
            elapsed_us: self.timings.then(|| started.elapsed().as_micros() as u64),
        });
        self.seq += 1;
    }

    fn fail(mut self, error: impl std::fmt::Display) -> (ComponentOutcome, ComponentTrace) {
        tracing::warn!(component = %self.trace.text, %error, "component mapped to NA");
        self.trace.error = Some(error.to_string());
        (ComponentOutcome::Na, self.trace)
    }
}

/// Domain hint for routing: units always route as units; the base entity
/// takes the decomposition's domain; other components are unrouted.
pub fn component_domain(component: &Component, decomposition: Option<&DecomposedQuery>) -> Option<String> {
    match component.kind {
        ComponentKind::Unit => Some(UNIT_DOMAIN.to_owned()),
        ComponentKind::BaseEntity => decomposition.and_then(|d| d.domain_hint.clone()),
        _ => None,
    }
}

fn ids(candidates: &[Candidate]) -> Vec<OmopId> {
    candidates.iter().map(|c| c.omop_id).collect()
}

/// Survivor that matches `text` exactly under a name or synonym; ties go to
/// the most preferred vocabulary of the route, then survivor order.
fn find_exact_among<'c>(
    survivors: &'c [Candidate],
    text: &str,
    domain: Option<&str>,
    ctx: &PipelineContext,
) -> Option<&'c Candidate> {
    let exact: Vec<OmopId> = ctx.store.find_exact(text).iter().map(|c| c.omop_id).collect();
    survivors
        .iter()
        .enumerate()
        .filter(|(_, c)| exact.contains(&c.omop_id))
        .min_by_key(|(i, c)| {
            (route_preference(&ctx.rules, domain, &c.vocabulary).unwrap_or(usize::MAX), *i)
        })
        .map(|(_, c)| c)
}

/// Links one component. See the module docs for the stage order.
pub fn map_component(
    component: &Component,
    scope: &EntryScope<'_>,
    ctx: &PipelineContext,
) -> (ComponentOutcome, ComponentTrace) {
    let domain = component_domain(component, scope.decomposition);
    let mut t = Tracer {
        trace: ComponentTrace {
            text: component.text.clone(),
            domain_hint: domain.clone(),
            stages: Vec::new(),
            rerank_calls: 0,
            judge_calls: 0,
            retrieved: Vec::new(),
            survivors: Vec::new(),
            ranking: Vec::new(),
            scores: Vec::new(),
            judgement: None,
            queued_for_review: false,
            error: None,
        },
        timings: ctx.config.timings,
        seq: 0,
    };

    let started = Instant::now();
    if let Some(hit) = ctx.reservoir.lookup(&component.text) {
        t.stage(Stage::Reservoir, hit.concepts.len(), started);
        t.trace.ranking = hit.concepts.iter().map(|c| c.omop_id).collect();
        return (ComponentOutcome::ReservoirHit { concepts: hit.concepts }, t.trace);
    }
    t.stage(Stage::Reservoir, 0, started);

    let started = Instant::now();
    let retrieved = match ctx.index.merge_retrieve(&*ctx.embedder, &component.text, ctx.config.k) {
        Ok(c) => c,
        Err(e) => return t.fail(e),
    };
    t.trace.retrieved = ids(&retrieved);
    t.stage(Stage::Retrieval, retrieved.len(), started);

    let started = Instant::now();
    let context = format!("{} {}", scope.entry.label, component.text);
    let routed = apply_linking_rules(retrieved, domain.as_deref(), &ctx.rules, &context);
    t.stage(Stage::LinkingRules, routed.len(), started);

    let started = Instant::now();
    let survivors = match filter_by_similarity(routed, &component.text, &*ctx.embedder, ctx.config.tau) {
        Ok(s) => s,
        Err(e) => return t.fail(e),
    };
    t.trace.survivors = ids(&survivors);
    t.stage(Stage::SimilarityFilter, survivors.len(), started);
    if survivors.is_empty() {
        return (ComponentOutcome::Na, t.trace);
    }

    let started = Instant::now();
    if let Some(exact) = find_exact_among(&survivors, &component.text, domain.as_deref(), ctx) {
        t.stage(Stage::ExactMatch, 1, started);
        let mut ranking = vec![exact.omop_id];
        ranking.extend(survivors.iter().map(|c| c.omop_id).filter(|id| *id != exact.omop_id));
        t.trace.ranking = ranking;
        let outcome = ComponentOutcome::ExactMatch { omop_id: exact.omop_id };
        gate(component, scope, exact, &survivors, &[], &mut t, ctx);
        return (outcome, t.trace);
    }

    let started = Instant::now();
    let directives: Vec<String> = survivors
        .iter()
        .flat_map(|c| c.directives.iter().cloned())
        .fold(Vec::new(), |mut acc, d| {
            if !acc.contains(&d) {
                acc.push(d);
            }
            acc
        });
    let rerank = match self_consistency(
        &component.text,
        &survivors,
        &directives,
        &*ctx.llm,
        &ctx.config.rerank,
    ) {
        Ok(r) => r,
        Err(e) => {
            t.trace.rerank_calls += ctx.config.rerank.n * 2;
            return t.fail(e);
        }
    };
    t.trace.rerank_calls += rerank.provider_calls;
    t.trace.ranking = reranker::ranking(&rerank.scored);
    t.trace.scores = rerank
        .scored
        .iter()
        .map(|s| ScoreSummary {
            omop_id: s.candidate.omop_id,
            relevance_scores: s.relevance_scores.clone(),
            confidence: s.confidence,
        })
        .collect();
    let decision = select_top(&rerank.scored, &ctx.config.rerank);
    t.stage(Stage::Rerank, usize::from(!decision.is_na()), started);
    match decision {
        MatchDecision::Na => (ComponentOutcome::Na, t.trace),
        MatchDecision::Match { omop_id, confidence, .. } => {
            let chosen = survivors.iter().find(|c| c.omop_id == omop_id).expect("selected from survivors");
            gate(component, scope, chosen, &survivors, &rerank.scored, &mut t, ctx);
            (ComponentOutcome::Reranked { omop_id, confidence }, t.trace)
        }
    }
}

/// Judge the chosen concept and queue it for review unless judged incorrect.
fn gate(
    component: &Component,
    scope: &EntryScope<'_>,
    chosen: &Candidate,
    survivors: &[Candidate],
    scored: &[reranker::ScoredCandidate],
    t: &mut Tracer,
    ctx: &PipelineContext,
) {
    let started = Instant::now();
    t.trace.judge_calls += 1;
    let judgement = match judge(
        &component.text,
        &chosen.name,
        &chosen.vocabulary,
        &chosen.code,
        &chosen.matched_surface,
        &*ctx.llm,
    ) {
        Ok(j) => j,
        Err(e) => {
            t.trace.error = Some(format!("judge failed: {e}"));
            t.stage(Stage::Judge, 0, started);
            return;
        }
    };
    t.trace.judgement = Some(judgement);
    t.stage(Stage::Judge, 1, started);

    let started = Instant::now();
    let candidates = survivors
        .iter()
        .map(|c| {
            let s = scored.iter().find(|s| s.candidate.omop_id == c.omop_id);
            ReviewCandidate {
                omop_id: c.omop_id,
                code: c.code.clone(),
                name: c.name.clone(),
                vocabulary: c.vocabulary.clone(),
                confidence: s.map(|s| s.confidence),
                mean_score: s.map(|s| s.mean_score()),
            }
        })
        .collect();
    let request = EnqueueRequest {
        label: component.text.clone(),
        concepts: vec![ConceptRef { code: chosen.code.clone(), omop_id: chosen.omop_id, role: None }],
        judgement,
        context: ReviewContext {
            entry_name: Some(scope.entry.name.clone()).filter(|n| !n.is_empty()),
            entry_label: Some(scope.entry.label.clone()),
            component: Some(scope.component.to_owned()),
            decomposition: scope.decomposition.cloned(),
            candidates,
        },
    };
    match ctx.reservoir.enqueue(request) {
        Ok(id) => t.trace.queued_for_review = id.is_some(),
        Err(e) => t.trace.error = Some(format!("enqueue failed: {e}")),
    }
    t.stage(Stage::Enqueue, usize::from(t.trace.queued_for_review), started);
}

fn na_result(entry: &DataDictionaryEntry, trace: EntryTrace, ctx: &PipelineContext) -> MappingResult {
    MappingResult {
        name: entry.name.clone(),
        label: entry.label.clone(),
        decomposition: None,
        component_results: ComponentResults::Na,
        trace: ctx.config.trace.then_some(trace),
    }
}

/// Validates, decomposes and links every component of one entry.
pub fn map_entry(entry: &DataDictionaryEntry, ctx: &PipelineContext) -> MappingResult {
    let mut trace = EntryTrace::default();
    let entry = match validate_input(entry) {
        Ok(e) => e,
        Err(e) => {
            trace.error = Some(e.to_string());
            return na_result(entry, trace, ctx);
        }
    };
    let options = DecomposeOptions {
        examples: ctx.config.examples,
        max_retries: ctx.config.decompose_retries,
        seed: Some(ctx.config.rerank.base_seed),
        rules_text: ctx.rules.to_prompt_text(),
    };
    let decomposition = match decompose(&entry, &*ctx.llm, &ctx.bank, &*ctx.embedder, &options) {
        Ok(d) => d,
        Err(e) => {
            tracing::warn!(label = %entry.label, error = %e, "decomposition failed; entry is NA");
            if let crate::decomposer::DecomposeError::Failure { attempts, .. } = &e {
                trace.decompose_attempts = *attempts;
            }
            trace.error = Some(e.to_string());
            return na_result(&entry, trace, ctx);
        }
    };
    trace.decompose_attempts = decomposition.attempts;
    let query = decomposition.query;
    let mut results = IndexMap::new();
    for component in query.components() {
        let scope = EntryScope { entry: &entry, decomposition: Some(&query), component: &component.name };
        let (outcome, component_trace) = map_component(&component, &scope, ctx);
        results.insert(component.name.clone(), ComponentResult::new(&component, &outcome, &ctx.store));
        trace.components.insert(component.name.clone(), component_trace);
    }
    MappingResult {
        name: entry.name.clone(),
        label: entry.label.clone(),
        decomposition: Some(query),
        component_results: ComponentResults::Mapped(results),
        trace: ctx.config.trace.then_some(trace),
    }
}

/// Maps entries on a pool of `parallelism` threads. Output order follows
/// input order; `progress(done, total)` fires after each entry.
pub fn map_dictionary(
    entries: &[DataDictionaryEntry],
    ctx: &PipelineContext,
    parallelism: usize,
    progress: Option<&(dyn Fn(usize, usize) + Sync)>,
) -> Vec<MappingResult> {
    let total = entries.len();
    let done = AtomicUsize::new(0);
    let run = || {
        entries
            .par_iter()
            .map(|entry| {
                let result = map_entry(entry, ctx);
                let n = done.fetch_add(1, Ordering::SeqCst) + 1;
                if let Some(progress) = progress {
                    progress(n, total);
                }
                result
            })
            .collect()
    };
    match rayon::ThreadPoolBuilder::new().num_threads(parallelism.max(1)).build() {
        Ok(pool) => pool.install(run),
        Err(e) => {
            tracing::warn!(error = %e, "could not build worker pool; mapping on the global pool");
            run()
        }
    }
}

/// Pretty JSON array with a trailing newline.
pub fn results_to_json(results: &[MappingResult]) -> String {
    let mut out = serde_json::to_string_pretty(results).expect("serializable results");
    out.push('\n');
    out
}

pub fn results_from_json(text: &str) -> Result<Vec<MappingResult>, serde_json::Error> {
    serde_json::from_str(text)
}
