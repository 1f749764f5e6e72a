#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use cdemap_core::decomposer::{load_dictionary, DataDictionaryEntry, ExampleBank};
use cdemap_core::filter::LinkingRules;
use cdemap_core::pipeline::{PipelineConfig, PipelineContext};
use cdemap_core::provider::{
    CompletionRequest, EmbeddingProvider, HashingEmbedder, HeuristicLlm, LlmProvider,
    ProviderError, ScriptedLlm, Task,
};
use cdemap_core::reservoir::Reservoir;
use cdemap_core::vocab::{expand_synonyms, load_kb_dir, ConceptStore, ExpansionConfig};
use regex::Regex;
use serde::Deserialize;

pub const BLESS_VAR: &str = "CDEMAP_BLESS";

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

pub fn blessing() -> bool {
    std::env::var_os(BLESS_VAR).is_some()
}

/// Compares `actual` with a golden file, or rewrites it when blessing.
pub fn golden(rel: &str, actual: &str) {
    let path = fixture(rel);
    if blessing() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}; rerun with {BLESS_VAR}=1", path.display()));
    if expected != actual {
        let line = expected
            .lines()
            .zip(actual.lines())
            .position(|(a, b)| a != b)
            .unwrap_or_else(|| expected.lines().count().min(actual.lines().count()));
        panic!(
            "{} differs from the golden file at line {}\nexpected: {:?}\nactual:   {:?}",
            path.display(),
            line + 1,
            expected.lines().nth(line),
            actual.lines().nth(line)
        );
    }
}

pub fn raw_store(kb: &str) -> ConceptStore {
    load_kb_dir(&fixture(&format!("kb/{kb}"))).unwrap()
}

pub fn store(kb: &str) -> Arc<ConceptStore> {
    Arc::new(expand_synonyms(raw_store(kb), &ExpansionConfig::default()))
}

pub fn embedder() -> Arc<dyn EmbeddingProvider> {
    Arc::new(HashingEmbedder::default())
}

pub fn dictionary() -> Vec<DataDictionaryEntry> {
    load_dictionary(&fixture("dictionary.csv")).unwrap()
}

pub fn rules() -> LinkingRules {
    LinkingRules::load(&fixture("rules.json")).unwrap()
}

pub fn bank(embedder: &dyn EmbeddingProvider) -> ExampleBank {
    ExampleBank::load(&fixture("example_bank.json"), embedder).unwrap()
}

pub fn traced() -> PipelineConfig {
    PipelineConfig { trace: true, ..PipelineConfig::default() }
}

/// Clinical fixture context around `llm` with a fresh in-memory reservoir.
pub fn clinical_context(llm: Arc<dyn LlmProvider>, config: PipelineConfig) -> PipelineContext {
    let store = store("clinical");
    let reservoir = Arc::new(Reservoir::in_memory(store.clone()));
    context_with(store, reservoir, llm, config)
}

pub fn context_with(
    store: Arc<ConceptStore>,
    reservoir: Arc<Reservoir>,
    llm: Arc<dyn LlmProvider>,
    config: PipelineConfig,
) -> PipelineContext {
    let embedder = embedder();
    let bank = Arc::new(bank(&*embedder));
    let rules = rules();
    rules.validate(&store).unwrap();
    PipelineContext::new(store, embedder, llm, bank, Arc::new(rules), reservoir, config).unwrap()
}

/// Replays `fixtures/scripted.json`; unscripted prompts fail.
pub fn scripted() -> ScriptedLlm {
    let path = fixture("scripted.json");
    ScriptedLlm::load(&path)
        .unwrap_or_else(|e| panic!("{}: {e}; rerun with {BLESS_VAR}=1", path.display()))
}

#[derive(Debug, Deserialize)]
pub struct Authored {
    /// Entry label → completions for successive attempts.
    pub decompositions: BTreeMap<String, Vec<String>>,
    /// Rerank query → name of the candidate the scripted reranker favours.
    pub rerank_preferences: BTreeMap<String, String>,
}

impl Authored {
    pub fn load() -> Self {
        serde_json::from_str(&std::fs::read_to_string(fixture("authored.json")).unwrap()).unwrap()
    }
}

/// Produces the scripted fixture: hand-written decompositions and rerank
/// preferences on top of [`HeuristicLlm`], recording every completion by
/// fingerprint.
pub struct Recorder {
    authored: Authored,
    heuristic: HeuristicLlm,
    attempts: Mutex<HashMap<String, usize>>,
    log: Mutex<BTreeMap<String, String>>,
}

fn query_section(prompt: &str) -> Vec<&str> {
    prompt
        .lines()
        .skip_while(|l| l.trim() != "### Query")
        .skip(1)
        .take_while(|l| !l.starts_with("### "))
        .collect()
}

impl Recorder {
    pub fn new() -> Self {
        Self {
            authored: Authored::load(),
            heuristic: HeuristicLlm::new(),
            attempts: Mutex::new(HashMap::new()),
            log: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn into_scripted(self) -> ScriptedLlm {
        let mut scripted = ScriptedLlm::new();
        for (fp, text) in self.log.into_inner().unwrap() {
            scripted.insert_fingerprint(fp, text);
        }
        scripted
    }

    fn decompose(&self, request: &CompletionRequest<'_>) -> Result<String, ProviderError> {
        let label = query_section(request.prompt)
            .into_iter()
            .find_map(|l| l.strip_prefix("label: "))
            .unwrap_or_default()
            .to_owned();
        let Some(script) = self.authored.decompositions.get(&label) else {
            return self.heuristic.complete(request);
        };
        let mut attempts = self.attempts.lock().unwrap();
        let n = attempts.entry(label).or_insert(0);
        let text = script[(*n).min(script.len() - 1)].clone();
        *n += 1;
        Ok(text)
    }

    fn rerank(&self, request: &CompletionRequest<'_>) -> Result<String, ProviderError> {
        let base = self.heuristic.complete(request)?;
        let query = query_section(request.prompt).first().copied().unwrap_or_default().to_owned();
        let Some(preferred) = self.authored.rerank_preferences.get(&query) else {
            return Ok(base);
        };
        let line = Regex::new(r"^(\d+)\. (.+?) \[").unwrap();
        let names: HashMap<String, String> = request
            .prompt
            .lines()
            .filter_map(|l| line.captures(l.trim()))
            .map(|c| (c[1].to_owned(), c[2].to_owned()))
            .collect();
        let out: Vec<String> = base
            .lines()
            .map(|l| {
                let (i, s) = l.split_once(':').unwrap();
                let score: u8 = s.parse().unwrap();
                if names.get(i) == Some(preferred) {
                    format!("{i}:10")
                } else {
                    format!("{i}:{}", score.min(6))
                }
            })
            .collect();
        Ok(out.join("\n"))
    }
}

impl LlmProvider for Recorder {
    fn name(&self) -> &str {
        "recorder"
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ProviderError> {
        let text = match request.task {
            Task::Decompose => self.decompose(request)?,
            Task::Rerank => self.rerank(request)?,
            Task::Judge => self.heuristic.complete(request)?,
        };
        self.log.lock().unwrap().insert(request.fingerprint(), text.clone());
        Ok(text)
    }
}

/// Rewrites `fixtures/scripted.json` by running the fixture dictionary
/// through a [`Recorder`].
pub fn bless_scripted() {
    let recorder = Arc::new(Recorder::new());
    let ctx = clinical_context(recorder.clone(), traced());
    cdemap_core::pipeline::map_dictionary(&dictionary(), &ctx, 1, None);
    drop(ctx);
    let recorder = Arc::try_unwrap(recorder).ok().expect("recorder still shared");
    std::fs::write(fixture("scripted.json"), recorder.into_scripted().to_json()).unwrap();
}
