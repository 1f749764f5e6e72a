//! Knowledge reservoir: validated label → concept mappings.
//!
//! A mapping reaches the reservoir only after an LLM judge calls it correct
//! or partially correct; it becomes servable only after a reviewer approves
//! or modifies it. Reads go against an immutable snapshot that is swapped
//! after every commit; all mutations are serialized through one writer.
//!
//! Persistence is an append-only JSON-lines log, compacted when opened. The
//! record format is described in `docs/reservoir-log.md`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use arc_swap::ArcSwap;
use chrono::{DateTime, Utc};
use percent_encoding::{utf8_percent_encode, AsciiSet, CONTROLS};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decomposer::DecomposedQuery;
use crate::provider::{CompletionRequest, LlmProvider, ProviderError, Task};
use crate::text::normalize_surface;
use crate::vocab::{ConceptStore, OmopId};

#[derive(Debug, Error)]
pub enum ReservoirError {
    #[error("reservoir log {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("reservoir log line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("unknown review id {0}")]
    UnknownReview(u64),
    #[error("review {review_id} is already {status:?}")]
    NotPending { review_id: u64, status: ReviewStatus },
    #[error("omop_id {0} does not resolve in the concept store")]
    InvalidConcept(OmopId),
    #[error("a mapping needs at least one concept")]
    EmptyConcepts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Judgement {
    Correct,
    PartiallyCorrect,
    Incorrect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Pending,
    Approved,
    Rejected,
    Modified,
}

impl ReviewStatus {
    pub fn is_servable(self) -> bool {
        matches!(self, ReviewStatus::Approved | ReviewStatus::Modified)
    }
}

/// How a concept relates to the base concept of a composite mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentRole {
    Unit,
    Category,
    Visit,
    Associated,
}

impl ComponentRole {
    pub fn predicate(self) -> &'static str {
        match self {
            ComponentRole::Unit => "hasUnit",
            ComponentRole::Category => "hasCategory",
            ComponentRole::Visit => "hasVisit",
            ComponentRole::Associated => "associatedWith",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptRef {
    pub code: String,
    pub omop_id: OmopId,
    /// Absent for the base concept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<ComponentRole>,
}

/// A candidate as shown to reviewers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewCandidate {
    pub omop_id: OmopId,
    pub code: String,
    pub name: String,
    pub vocabulary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_score: Option<f64>,
}

/// What the reviewer needs to judge a mapping.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReviewContext {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decomposition: Option<DecomposedQuery>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<ReviewCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReservoirEntry {
    pub review_id: u64,
    pub label: String,
    /// Normalized label, the lookup key.
    pub key: String,
    pub concepts: Vec<ConceptRef>,
    pub judgement: Judgement,
    pub review_status: ReviewStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer: Option<String>,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decided_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub context: ReviewContext,
}

impl ReservoirEntry {
    pub fn omop_ids(&self) -> BTreeSet<OmopId> {
        self.concepts.iter().map(|c| c.omop_id).collect()
    }
}

#[derive(Debug, Clone)]
pub struct EnqueueRequest {
    pub label: String,
    pub concepts: Vec<ConceptRef>,
    pub judgement: Judgement,
    pub context: ReviewContext,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModifiedConcept {
    pub omop_id: OmopId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<ComponentRole>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum ReviewDecision {
    Approve,
    Reject,
    Modify { concepts: Vec<ModifiedConcept> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

const IRI_UNSAFE: &AsciiSet = &CONTROLS
    .add(b' ')
    .add(b'"')
    .add(b'<')
    .add(b'>')
    .add(b'{')
    .add(b'}')
    .add(b'|')
    .add(b'\\')
    .add(b'^')
    .add(b'`')
    .add(b'%');

impl Triple {
    pub fn new(subject: impl Into<String>, predicate: &str, object: impl Into<String>) -> Self {
        Self { subject: subject.into(), predicate: predicate.into(), object: object.into() }
    }

    /// `<s> <p> <o> .` with every term percent-encoded to be IRI-safe.
    pub fn to_ntriples(&self) -> String {
        let esc = |s: &str| utf8_percent_encode(s, IRI_UNSAFE).to_string();
        format!("<{}> <{}> <{}> .", esc(&self.subject), esc(&self.predicate), esc(&self.object))
    }
}

/// `label mapsTo omop` and `omop hasCode code` for every concept, plus a
/// role link from the base concept to each role-bearing concept.
pub fn export_triples(entry: &ReservoirEntry) -> Vec<Triple> {
    let mut out = Vec::new();
    for c in &entry.concepts {
        out.push(Triple::new(entry.label.clone(), "mapsTo", c.omop_id.to_string()));
        out.push(Triple::new(c.omop_id.to_string(), "hasCode", c.code.clone()));
    }
    if let Some(base) = entry.concepts.iter().find(|c| c.role.is_none()) {
        for c in entry.concepts.iter().filter(|c| c.role.is_some()) {
            let role = c.role.expect("filtered");
            out.push(Triple::new(base.omop_id.to_string(), role.predicate(), c.omop_id.to_string()));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictionaryRecord {
    pub label: String,
    pub concepts: Vec<ConceptRef>,
}

/// Zero-shot prompt asking whether `concept` represents `label`.
pub fn build_judge_prompt(label: &str, concept_name: &str, vocabulary: &str, code: &str, matched: &str) -> String {
    let mut p = format!(
        "### Task\nDecide whether the concept correctly represents the clinical term. \
         Answer with exactly one of: correct, partially correct, incorrect.\n\n\
         ### Term\n{label}\n\n### Concept\n{concept_name} [vocabulary: {vocabulary}; code: {code}"
    );
    if !matched.is_empty() && normalize_surface(matched) != normalize_surface(concept_name) {
        p.push_str(&format!("; also known as: {matched}"));
    }
    p.push_str("]\n");
    p
}

/// Maps a judge completion to a verdict; anything unrecognized is incorrect.
pub fn parse_judgement(text: &str) -> Judgement {
    let t = normalize_surface(&text.replace(['_', '-'], " "));
    if t.contains("partially correct") {
        Judgement::PartiallyCorrect
    } else if t.contains("incorrect") || t.contains("not correct") {
        Judgement::Incorrect
    } else if t.contains("correct") {
        Judgement::Correct
    } else {
        Judgement::Incorrect
    }
}

pub fn judge(
    label: &str,
    concept_name: &str,
    vocabulary: &str,
    code: &str,
    matched: &str,
    llm: &dyn LlmProvider,
) -> Result<Judgement, ProviderError> {
    let prompt = build_judge_prompt(label, concept_name, vocabulary, code, matched);
    let text = llm.complete(&CompletionRequest::new(Task::Judge, &prompt).with_seed(Some(0)))?;
    Ok(parse_judgement(&text))
}

pub type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

/// Immutable reservoir state published to readers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Snapshot {
    entries: BTreeMap<u64, ReservoirEntry>,
    servable: HashMap<String, u64>,
    next_id: u64,
}

impl Snapshot {
    pub fn entries(&self) -> impl Iterator<Item = &ReservoirEntry> {
        self.entries.values()
    }

    pub fn get(&self, review_id: u64) -> Option<&ReservoirEntry> {
        self.entries.get(&review_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, label: &str) -> Option<&ReservoirEntry> {
        self.servable.get(&normalize_surface(label)).and_then(|id| self.entries.get(id))
    }

    /// Recomputes which entry serves `key`: the latest decided servable one.
    fn refresh_key(&mut self, key: &str) {
        let best = self
            .entries
            .values()
            .filter(|e| e.key == key && e.review_status.is_servable())
            .max_by_key(|e| (e.decided_at, e.review_id))
            .map(|e| e.review_id);
        match best {
            Some(id) => self.servable.insert(key.to_owned(), id),
            None => self.servable.remove(key),
        };
    }

    fn insert(&mut self, entry: ReservoirEntry) {
        let key = entry.key.clone();
        self.next_id = self.next_id.max(entry.review_id + 1);
        self.entries.insert(entry.review_id, entry);
        self.refresh_key(&key);
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum LogRecord {
    Enqueue {
        entry: Box<ReservoirEntry>,
    },
    Decide {
        review_id: u64,
        status: ReviewStatus,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reviewer: Option<String>,
        decided_at: DateTime<Utc>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        concepts: Option<Vec<ConceptRef>>,
    },
}

fn apply_record(snapshot: &mut Snapshot, record: &LogRecord) -> Result<(), String> {
    match record {
        LogRecord::Enqueue { entry } => {
            if entry.key != normalize_surface(&entry.label) {
                return Err(format!("entry {} has a stale key", entry.review_id));
            }
            snapshot.insert(ReservoirEntry::clone(entry));
        }
        LogRecord::Decide { review_id, status, reviewer, decided_at, concepts } => {
            let entry = snapshot
                .entries
                .get_mut(review_id)
                .ok_or_else(|| format!("decision for unknown review {review_id}"))?;
            if entry.review_status != ReviewStatus::Pending || *status == ReviewStatus::Pending {
                return Err(format!("invalid transition for review {review_id}"));
            }
            entry.review_status = *status;
            entry.reviewer = reviewer.clone();
            entry.decided_at = Some(*decided_at);
            if let Some(concepts) = concepts {
                entry.concepts = concepts.clone();
            }
            let key = entry.key.clone();
            snapshot.refresh_key(&key);
        }
    }
    Ok(())
}

struct Writer {
    path: Option<PathBuf>,
    file: Option<File>,
}

impl Writer {
    fn append(&mut self, record: &LogRecord) -> Result<(), ReservoirError> {
        let Some(file) = self.file.as_mut() else {
            return Ok(());
        };
        let mut line = serde_json::to_string(record).expect("serializable record");
        line.push('\n');
        let path = self.path.as_ref().expect("file implies path");
        file.write_all(line.as_bytes())
            .and_then(|_| file.flush())
            .map_err(|source| ReservoirError::Io { path: path.display().to_string(), source })
    }
}

pub struct Reservoir {
    snapshot: ArcSwap<Snapshot>,
    writer: Mutex<Writer>,
    store: Arc<ConceptStore>,
    clock: Clock,
}

impl std::fmt::Debug for Reservoir {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Reservoir").field("entries", &self.snapshot.load().len()).finish()
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ReservoirError + '_ {
    move |source| ReservoirError::Io { path: path.display().to_string(), source }
}

/// Replays a log. A final line without its newline is a torn write and is
/// ignored when it does not parse.
pub fn replay(text: &str) -> Result<Snapshot, ReservoirError> {
    let mut snapshot = Snapshot::default();
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let last = i + 1 == lines.len();
        let record: LogRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(_) if last && !complete => {
                tracing::warn!(line = i + 1, "ignoring torn final reservoir record");
                break;
            }
            Err(e) => return Err(ReservoirError::Corrupt { line: i + 1, reason: e.to_string() }),
        };
        apply_record(&mut snapshot, &record)
            .map_err(|reason| ReservoirError::Corrupt { line: i + 1, reason })?;
    }
    Ok(snapshot)
}

fn compact(snapshot: &Snapshot) -> String {
    let mut out = String::new();
    for entry in snapshot.entries.values() {
        let record = LogRecord::Enqueue { entry: Box::new(entry.clone()) };
        out.push_str(&serde_json::to_string(&record).expect("serializable record"));
        out.push('\n');
    }
    out
}

impl Reservoir {
    /// A reservoir that lives only in memory.
    pub fn in_memory(store: Arc<ConceptStore>) -> Self {
        Self {
            snapshot: ArcSwap::from_pointee(Snapshot::default()),
            writer: Mutex::new(Writer { path: None, file: None }),
            store,
            clock: Arc::new(Utc::now),
        }
    }

    /// Opens (or creates) the log at `path`, replays and compacts it.
    pub fn open(path: &Path, store: Arc<ConceptStore>) -> Result<Self, ReservoirError> {
        let snapshot = if path.exists() {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            replay(&text)?
        } else {
            Snapshot::default()
        };
        for entry in snapshot.entries.values() {
            for c in &entry.concepts {
                if !store.contains(c.omop_id) {
                    return Err(ReservoirError::InvalidConcept(c.omop_id));
                }
            }
        }
        let tmp = path.with_extension("compacting");
        std::fs::write(&tmp, compact(&snapshot)).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io_err(path))?;
        let file = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
        Ok(Self {
            snapshot: ArcSwap::from_pointee(snapshot),
            writer: Mutex::new(Writer { path: Some(path.to_owned()), file: Some(file) }),
            store,
            clock: Arc::new(Utc::now),
        })
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn store(&self) -> &Arc<ConceptStore> {
        &self.store
    }

    /// Current published state.
    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.load_full()
    }

    /// Servable entry for `label`, if any.
    pub fn lookup(&self, label: &str) -> Option<ReservoirEntry> {
        self.snapshot.load().lookup(label).cloned()
    }

    pub fn get(&self, review_id: u64) -> Option<ReservoirEntry> {
        self.snapshot.load().get(review_id).cloned()
    }

    /// Pending entries ordered by creation time, `page` counted from 0.
    pub fn list_pending(&self, page: usize, page_size: usize) -> Vec<ReservoirEntry> {
        let snap = self.snapshot.load();
        let mut pending: Vec<&ReservoirEntry> =
            snap.entries().filter(|e| e.review_status == ReviewStatus::Pending).collect();
        pending.sort_by_key(|e| (e.created_at, e.review_id));
        pending.into_iter().skip(page * page_size).take(page_size).cloned().collect()
    }

    pub fn pending_count(&self) -> usize {
        self.snapshot.load().entries().filter(|e| e.review_status == ReviewStatus::Pending).count()
    }

    fn commit<T>(
        &self,
        f: impl FnOnce(&mut Snapshot, &ConceptStore, DateTime<Utc>) -> Result<(T, Option<LogRecord>), ReservoirError>,
    ) -> Result<T, ReservoirError> {
        let mut writer = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        let mut next = Snapshot::clone(&self.snapshot.load());
        let (value, record) = f(&mut next, &self.store, (self.clock)())?;
        if let Some(record) = record {
            writer.append(&record)?;
            self.snapshot.store(Arc::new(next));
        }
        Ok(value)
    }

    /// Stores a judged mapping for review. Incorrect judgements are
    /// discarded (`None`); an identical pending mapping is reused.
    pub fn enqueue(&self, request: EnqueueRequest) -> Result<Option<u64>, ReservoirError> {
        if request.judgement == Judgement::Incorrect {
            tracing::info!(label = %request.label, "judge rejected mapping; not queued");
            return Ok(None);
        }
        if request.concepts.is_empty() {
            return Err(ReservoirError::EmptyConcepts);
        }
        self.commit(|snap, store, now| {
            for c in &request.concepts {
                if !store.contains(c.omop_id) {
                    return Err(ReservoirError::InvalidConcept(c.omop_id));
                }
            }
            let key = normalize_surface(&request.label);
            let ids: BTreeSet<OmopId> = request.concepts.iter().map(|c| c.omop_id).collect();
            if let Some(existing) = snap.entries().find(|e| {
                e.review_status == ReviewStatus::Pending && e.key == key && e.omop_ids() == ids
            }) {
                return Ok((Some(existing.review_id), None));
            }
            let entry = ReservoirEntry {
                review_id: snap.next_id.max(1),
                label: request.label.trim().to_owned(),
                key,
                concepts: request.concepts,
                judgement: request.judgement,
                review_status: ReviewStatus::Pending,
                reviewer: None,
                created_at: now,
                decided_at: None,
                context: request.context,
            };
            let id = entry.review_id;
            snap.insert(entry.clone());
            Ok((Some(id), Some(LogRecord::Enqueue { entry: Box::new(entry) })))
        })
    }

    /// Records a reviewer decision. Decisions are final.
    pub fn apply_decision(
        &self,
        review_id: u64,
        decision: ReviewDecision,
        reviewer: Option<&str>,
    ) -> Result<ReservoirEntry, ReservoirError> {
        self.commit(|snap, store, now| {
            let entry = snap.get(review_id).ok_or(ReservoirError::UnknownReview(review_id))?;
            if entry.review_status != ReviewStatus::Pending {
                return Err(ReservoirError::NotPending { review_id, status: entry.review_status });
            }
            let (status, concepts) = match decision {
                ReviewDecision::Approve => (ReviewStatus::Approved, None),
                ReviewDecision::Reject => (ReviewStatus::Rejected, None),
                ReviewDecision::Modify { concepts } => {
                    if concepts.is_empty() {
                        return Err(ReservoirError::EmptyConcepts);
                    }
                    let mut refs = Vec::with_capacity(concepts.len());
                    for c in concepts {
                        let concept =
                            store.get(c.omop_id).ok_or(ReservoirError::InvalidConcept(c.omop_id))?;
                        refs.push(ConceptRef {
                            code: concept.code.clone(),
                            omop_id: c.omop_id,
                            role: c.role,
                        });
                    }
                    (ReviewStatus::Modified, Some(refs))
                }
            };
            let record = LogRecord::Decide {
                review_id,
                status,
                reviewer: reviewer.map(str::to_owned),
                decided_at: now,
                concepts,
            };
            apply_record(snap, &record).expect("validated transition");
            let entry = snap.get(review_id).cloned().expect("present");
            Ok((entry, Some(record)))
        })
    }

    /// Exact-lookup map of every servable label, sorted by key.
    pub fn export_dictionary(&self) -> Vec<DictionaryRecord> {
        let snap = self.snapshot.load();
        let mut keys: Vec<&String> = snap.servable.keys().collect();
        keys.sort();
        keys.into_iter()
            .map(|k| {
                let e = &snap.entries[&snap.servable[k]];
                DictionaryRecord { label: e.label.clone(), concepts: e.concepts.clone() }
            })
            .collect()
    }

    /// Triples of every servable entry.
    pub fn export_all_triples(&self) -> Vec<Triple> {
        let snap = self.snapshot.load();
        let mut ids: Vec<u64> = snap.servable.values().copied().collect();
        ids.sort_unstable();
        ids.into_iter().flat_map(|id| export_triples(&snap.entries[&id])).collect()
    }
}
