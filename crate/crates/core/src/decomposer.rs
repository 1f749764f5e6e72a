//! Query refinement and decomposition of data-dictionary entries.
//!
//! An entry is validated, a handful of curated examples are picked by
//! embedding similarity, and an LLM is asked for a structured completion
//! (a single JSON object). Each non-empty field of that object becomes a
//! sub-query that the pipeline links on its own.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::provider::{
    CompletionRequest, DenseVector, EmbeddingProvider, LlmProvider, ProviderError, Task,
};
use crate::text::{collapse_whitespace, normalize_surface};

pub const SECTION_TASK: &str = "### Task";
pub const SECTION_RULES: &str = "### Linking rules";
pub const SECTION_EXAMPLES: &str = "### Examples";
pub const SECTION_QUERY: &str = "### Query";
pub const SECTION_SCHEMA: &str = "### Output format";
pub const SECTION_CORRECTION: &str = "### Correction";

const INSTRUCTION: &str = "You standardize variables from clinical data dictionaries. \
First rewrite the variable description as a clear refined query. Then decompose it into \
components that can each be linked to a single controlled-vocabulary concept: the base \
entity, associated entities, category values, unit, visit, method and formula. Use only \
information present in the input. Category values keep their labels and drop numeric codes.";

const SCHEMA: &str = "Respond with a single JSON object and nothing else, using these fields:
{\"refined_query\": string, \"base_entity\": string, \"associated_entities\": [string], \
\"categories\": [string], \"unit\": string|null, \"visit\": string|null, \"method\": string|null, \
\"formula\": string|null, \"domain\": string|null}";

#[derive(Debug, Error)]
pub enum DecomposeError {
    #[error("invalid entry: {0}")]
    InvalidEntry(String),
    #[error("decomposition failed after {attempts} attempts: {last_error}")]
    Failure { attempts: u32, last_error: String },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("example {index} in the bank is invalid: {reason}")]
    InvalidExample { index: usize, reason: String },
}

#[derive(Debug, Error)]
pub enum DictionaryError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed dictionary: {}", format_rows(.0))]
    Rows(Vec<RowError>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RowError {
    /// 1-based record number (CSV: physical line, JSON: array position + 1).
    pub row: u64,
    pub message: String,
}

fn format_rows(rows: &[RowError]) -> String {
    rows.iter().map(|r| format!("row {}: {}", r.row, r.message)).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Continuous,
    Nominal,
    Ordinal,
}

impl Scale {
    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Continuous => "continuous",
            Scale::Nominal => "nominal",
            Scale::Ordinal => "ordinal",
        }
    }
}

impl FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "continuous" => Ok(Scale::Continuous),
            "nominal" => Ok(Scale::Nominal),
            "ordinal" => Ok(Scale::Ordinal),
            other => Err(format!("unknown scale {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<Scale>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub formula: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visit: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
}

impl EntryMetadata {
    pub fn is_empty(&self) -> bool {
        self == &EntryMetadata::default()
    }
}

/// One variable of a source data dictionary. Only the label is mandatory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDictionaryEntry {
    #[serde(default)]
    pub name: String,
    pub label: String,
    #[serde(flatten)]
    pub metadata: EntryMetadata,
}

impl DataDictionaryEntry {
    pub fn new(name: impl Into<String>, label: impl Into<String>) -> Self {
        Self { name: name.into(), label: label.into(), metadata: EntryMetadata::default() }
    }
}

/// Structured decomposition of one entry.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecomposedQuery {
    #[serde(default)]
    pub refined_query: String,
    pub base_entity: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub associated_entities: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visit: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub formula: Option<String>,
    #[serde(default, alias = "domain", skip_serializing_if = "Option::is_none")]
    pub domain_hint: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    BaseEntity,
    AssociatedEntity,
    Category,
    Unit,
    Visit,
    Method,
    Formula,
}

/// One sub-query produced by a decomposition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    /// Stable key in results, e.g. `base_entity` or `categories[1]`.
    pub name: String,
    pub kind: ComponentKind,
    pub text: String,
}

impl DecomposedQuery {
    /// A decomposition holding only a base entity.
    pub fn standalone(label: &str) -> Self {
        let label = collapse_whitespace(label);
        Self { refined_query: label.clone(), base_entity: label, ..Default::default() }
    }

    /// Sub-queries in a fixed order: base, associated, categories, unit,
    /// visit, method, formula.
    pub fn components(&self) -> Vec<Component> {
        let mut out = vec![Component {
            name: "base_entity".into(),
            kind: ComponentKind::BaseEntity,
            text: self.base_entity.clone(),
        }];
        for (i, text) in self.associated_entities.iter().enumerate() {
            out.push(Component {
                name: format!("associated_entities[{i}]"),
                kind: ComponentKind::AssociatedEntity,
                text: text.clone(),
            });
        }
        for (i, text) in self.categories.iter().enumerate() {
            out.push(Component {
                name: format!("categories[{i}]"),
                kind: ComponentKind::Category,
                text: text.clone(),
            });
        }
        let singles = [
            ("unit", ComponentKind::Unit, &self.unit),
            ("visit", ComponentKind::Visit, &self.visit),
            ("method", ComponentKind::Method, &self.method),
            ("formula", ComponentKind::Formula, &self.formula),
        ];
        for (name, kind, value) in singles {
            if let Some(text) = value {
                out.push(Component { name: name.into(), kind, text: text.clone() });
            }
        }
        out
    }

    /// Cleans a raw decomposition so it satisfies the structural invariants:
    /// strings trimmed, empty values dropped, lists deduplicated, category
    /// codes removed. Fails when no base entity remains.
    pub fn normalized(self) -> Result<Self, String> {
        let base_entity = collapse_whitespace(&self.base_entity);
        if base_entity.is_empty() {
            return Err("base_entity is missing or empty".into());
        }
        let refined = collapse_whitespace(&self.refined_query);
        Ok(Self {
            refined_query: if refined.is_empty() { base_entity.clone() } else { refined },
            base_entity,
            associated_entities: clean_list(self.associated_entities.iter().map(String::as_str)),
            categories: clean_list(self.categories.iter().map(|c| strip_category_code(c))),
            unit: clean_opt(self.unit),
            visit: clean_opt(self.visit),
            method: clean_opt(self.method),
            formula: clean_opt(self.formula),
            domain_hint: clean_opt(self.domain_hint),
        })
    }
}

fn clean_opt(value: Option<String>) -> Option<String> {
    value.map(|v| collapse_whitespace(&v)).filter(|v| !v.is_empty())
}

fn clean_list<'a>(values: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut seen = HashSet::new();
    values
        .map(collapse_whitespace)
        .filter(|v| !v.is_empty() && seen.insert(normalize_surface(v)))
        .collect()
}

static CATEGORY_CODE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*[-+]?\d+(?:\.\d+)?\s*[=:]\s*(.+?)\s*$").unwrap());

/// `"0=No"` → `"No"`; values without a leading numeric code are unchanged.
pub fn strip_category_code(value: &str) -> &str {
    match CATEGORY_CODE.captures(value) {
        Some(caps) => caps.get(1).map_or(value, |m| m.as_str()),
        None => value.trim(),
    }
}

/// Trims every string field, rejects an empty label and deduplicates
/// categories preserving their first occurrence.
pub fn validate_input(entry: &DataDictionaryEntry) -> Result<DataDictionaryEntry, DecomposeError> {
    let label = collapse_whitespace(&entry.label);
    if label.is_empty() {
        return Err(DecomposeError::InvalidEntry(format!(
            "entry {:?} has an empty label",
            entry.name
        )));
    }
    let m = &entry.metadata;
    Ok(DataDictionaryEntry {
        name: collapse_whitespace(&entry.name),
        label,
        metadata: EntryMetadata {
            data_type: clean_opt(m.data_type.clone()),
            scale: m.scale,
            unit: clean_opt(m.unit.clone()),
            formula: clean_opt(m.formula.clone()),
            visit: clean_opt(m.visit.clone()),
            categories: clean_list(m.categories.iter().map(String::as_str)),
        },
    })
}

/// Entries whose label is at most two tokens and which carry no metadata
/// are linked as-is, without asking the LLM.
pub fn is_bare_term(entry: &DataDictionaryEntry) -> bool {
    entry.label.split_whitespace().count() <= 2 && entry.metadata.is_empty()
}

/// Curated input/output pair used for in-context prompting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankExample {
    pub input: DataDictionaryEntry,
    pub output: DecomposedQuery,
}

/// Example pairs with their label embeddings.
#[derive(Debug, Clone, Default)]
pub struct ExampleBank {
    examples: Vec<BankExample>,
    embeddings: Vec<DenseVector>,
}

impl ExampleBank {
    pub fn new(
        examples: Vec<BankExample>,
        embedder: &dyn EmbeddingProvider,
    ) -> Result<Self, DecomposeError> {
        for (index, ex) in examples.iter().enumerate() {
            let normalized = ex.output.clone().normalized();
            if normalized.as_ref() != Ok(&ex.output) {
                let reason = normalized.err().unwrap_or_else(|| "output is not normalized".into());
                return Err(DecomposeError::InvalidExample { index, reason });
            }
        }
        let labels: Vec<&str> = examples.iter().map(|e| e.input.label.as_str()).collect();
        let embeddings = embedder.embed_dense_batch(&labels)?;
        Ok(Self { examples, embeddings })
    }

    pub fn load(path: &Path, embedder: &dyn EmbeddingProvider) -> Result<Self, DecomposeError> {
        let text = std::fs::read_to_string(path).map_err(|e| DecomposeError::InvalidExample {
            index: 0,
            reason: format!("cannot read {}: {e}", path.display()),
        })?;
        let examples: Vec<BankExample> = serde_json::from_str(&text)
            .map_err(|e| DecomposeError::InvalidExample { index: 0, reason: e.to_string() })?;
        Self::new(examples, embedder)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[BankExample] {
        &self.examples
    }
}

/// The `m` bank examples whose labels are closest (cosine) to the entry
/// label. Ties keep bank order.
pub fn select_examples<'b>(
    entry: &DataDictionaryEntry,
    bank: &'b ExampleBank,
    m: usize,
    embedder: &dyn EmbeddingProvider,
) -> Result<Vec<&'b BankExample>, ProviderError> {
    if m == 0 || bank.is_empty() {
        return Ok(Vec::new());
    }
    let query = embedder.embed_dense(&entry.label)?;
    let mut scored: Vec<(f64, usize)> =
        bank.embeddings.iter().enumerate().map(|(i, e)| (query.cosine(e), i)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(m).map(|(_, i)| &bank.examples[i]).collect())
}

fn serialize_entry(entry: &DataDictionaryEntry, out: &mut String) {
    if !entry.name.is_empty() {
        let _ = writeln!(out, "name: {}", entry.name);
    }
    let _ = writeln!(out, "label: {}", entry.label);
    let m = &entry.metadata;
    let fields = [
        ("data_type", m.data_type.as_deref()),
        ("scale", m.scale.map(Scale::as_str)),
        ("unit", m.unit.as_deref()),
        ("formula", m.formula.as_deref()),
        ("visit", m.visit.as_deref()),
    ];
    for (key, value) in fields {
        if let Some(v) = value {
            let _ = writeln!(out, "{key}: {v}");
        }
    }
    if !m.categories.is_empty() {
        let _ = writeln!(out, "categories: {}", m.categories.join(" | "));
    }
}

/// Prompt layout: instruction, linking rules, examples, the entry, then the
/// output schema. Empty rules and example sections are left out.
pub fn build_decomposition_prompt(
    entry: &DataDictionaryEntry,
    examples: &[&BankExample],
    rules_text: &str,
) -> String {
    let mut p = String::new();
    let _ = writeln!(p, "{SECTION_TASK}\n{INSTRUCTION}\n");
    if !rules_text.trim().is_empty() {
        let _ = writeln!(p, "{SECTION_RULES}\n{}\n", rules_text.trim());
    }
    if !examples.is_empty() {
        let _ = writeln!(p, "{SECTION_EXAMPLES}");
        for ex in examples {
            p.push_str("Input:\n");
            serialize_entry(&ex.input, &mut p);
            let output = serde_json::to_string(&ex.output).expect("serializable");
            let _ = writeln!(p, "Output:\n{output}\n");
        }
    }
    let _ = writeln!(p, "{SECTION_QUERY}");
    serialize_entry(entry, &mut p);
    let _ = write!(p, "\n{SECTION_SCHEMA}\n{SCHEMA}\n");
    p
}

/// Prompt used for retry `attempt` after an unusable completion.
pub fn correction_prompt(base: &str, attempt: u32, max_attempts: u32, error: &str) -> String {
    format!(
        "{base}\n{SECTION_CORRECTION} (attempt {attempt} of {max_attempts})\n\
         Your previous answer could not be used: {error}. \
         Reply again with only the JSON object described above.\n"
    )
}

#[derive(Debug, Deserialize)]
struct RawDecomposition {
    #[serde(default)]
    refined_query: Option<String>,
    #[serde(default)]
    base_entity: Option<String>,
    #[serde(default)]
    associated_entities: Option<Vec<String>>,
    #[serde(default)]
    categories: Option<Vec<String>>,
    #[serde(default)]
    unit: Option<String>,
    #[serde(default)]
    visit: Option<String>,
    #[serde(default)]
    method: Option<String>,
    #[serde(default)]
    formula: Option<String>,
    #[serde(default, alias = "domain_hint")]
    domain: Option<String>,
}

/// Extracts and validates the JSON object in a completion. Code fences and
/// surrounding chatter are tolerated.
pub fn parse_completion(text: &str) -> Result<DecomposedQuery, String> {
    let start = text.find('{').ok_or("no JSON object in completion")?;
    let end = text.rfind('}').ok_or("unterminated JSON object")?;
    if end < start {
        return Err("unterminated JSON object".into());
    }
    let raw: RawDecomposition =
        serde_json::from_str(&text[start..=end]).map_err(|e| format!("invalid JSON: {e}"))?;
    DecomposedQuery {
        refined_query: raw.refined_query.unwrap_or_default(),
        base_entity: raw.base_entity.unwrap_or_default(),
        associated_entities: raw.associated_entities.unwrap_or_default(),
        categories: raw.categories.unwrap_or_default(),
        unit: raw.unit,
        visit: raw.visit,
        method: raw.method,
        formula: raw.formula,
        domain_hint: raw.domain,
    }
    .normalized()
}

#[derive(Debug, Clone)]
pub struct DecomposeOptions {
    /// In-context examples per prompt.
    pub examples: usize,
    pub max_retries: u32,
    pub seed: Option<u64>,
    pub rules_text: String,
}

impl Default for DecomposeOptions {
    fn default() -> Self {
        Self { examples: 3, max_retries: 2, seed: Some(0), rules_text: String::new() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub query: DecomposedQuery,
    /// Provider calls made; zero when the entry bypassed the LLM.
    pub attempts: u32,
}

/// Decomposes a validated entry.
///
/// Bare terms skip the provider. Otherwise the provider is called at
/// temperature 0; an unusable completion is retried with a correction
/// stanza up to `max_retries` times.
pub fn decompose(
    entry: &DataDictionaryEntry,
    llm: &dyn LlmProvider,
    bank: &ExampleBank,
    embedder: &dyn EmbeddingProvider,
    options: &DecomposeOptions,
) -> Result<Decomposition, DecomposeError> {
    if is_bare_term(entry) {
        return Ok(Decomposition { query: DecomposedQuery::standalone(&entry.label), attempts: 0 });
    }
    let examples = select_examples(entry, bank, options.examples, embedder)?;
    let base = build_decomposition_prompt(entry, &examples, &options.rules_text);
    let max_attempts = options.max_retries + 1;
    let mut prompt = base.clone();
    let mut last_error = String::new();
    for attempt in 1..=max_attempts {
        let request = CompletionRequest::new(Task::Decompose, &prompt).with_seed(options.seed);
        let completion = llm.complete(&request)?;
        match parse_completion(&completion) {
            Ok(query) => return Ok(Decomposition { query, attempts: attempt }),
            Err(err) => {
                tracing::debug!(attempt, error = %err, "unusable decomposition");
                last_error = err;
                prompt = correction_prompt(&base, attempt + 1, max_attempts, &last_error);
            }
        }
    }
    Err(DecomposeError::Failure { attempts: max_attempts, last_error })
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvEntry {
    #[serde(default)]
    name: String,
    #[serde(default)]
    label: String,
    #[serde(default)]
    data_type: String,
    #[serde(default)]
    scale: String,
    #[serde(default)]
    unit: String,
    #[serde(default)]
    formula: String,
    #[serde(default)]
    visit: String,
    #[serde(default)]
    categories: String,
}

fn non_empty(s: String) -> Option<String> {
    Some(s).filter(|s| !s.is_empty())
}

/// Parses a CSV dictionary (`name,label,data_type,scale,unit,formula,visit,categories`,
/// categories separated by `|`).
pub fn parse_dictionary_csv(raw: &[u8]) -> Result<Vec<DataDictionaryEntry>, DictionaryError> {
    let mut reader = csv::ReaderBuilder::new().from_reader(raw);
    let mut entries = Vec::new();
    let mut errors = Vec::new();
    for (i, row) in reader.deserialize::<CsvEntry>().enumerate() {
        let line = i as u64 + 2;
        let row = match row {
            Ok(row) => row,
            Err(e) => {
                let row = e.position().map_or(line, |p| p.line());
                errors.push(RowError { row, message: e.to_string() });
                continue;
            }
        };
        let scale = if row.scale.trim().is_empty() {
            None
        } else {
            match row.scale.parse() {
                Ok(s) => Some(s),
                Err(message) => {
                    errors.push(RowError { row: line, message });
                    continue;
                }
            }
        };
        let categories = if row.categories.trim().is_empty() {
            Vec::new()
        } else {
            row.categories.split('|').map(|c| c.trim().to_owned()).collect()
        };
        entries.push(DataDictionaryEntry {
            name: row.name,
            label: row.label,
            metadata: EntryMetadata {
                data_type: non_empty(row.data_type),
                scale,
                unit: non_empty(row.unit),
                formula: non_empty(row.formula),
                visit: non_empty(row.visit),
                categories,
            },
        });
    }
    if errors.is_empty() {
        Ok(entries)
    } else {
        Err(DictionaryError::Rows(errors))
    }
}

/// Parses an array-of-records dictionary, reporting every bad record.
pub fn parse_dictionary_json(text: &str) -> Result<Vec<DataDictionaryEntry>, DictionaryError> {
    let values: Vec<serde_json::Value> = serde_json::from_str(text).map_err(|e| {
        DictionaryError::Rows(vec![RowError { row: 0, message: format!("not a JSON array: {e}") }])
    })?;
    let mut entries = Vec::with_capacity(values.len());
    let mut errors = Vec::new();
    for (i, value) in values.into_iter().enumerate() {
        match serde_json::from_value::<DataDictionaryEntry>(value) {
            Ok(entry) => entries.push(entry),
            Err(e) => errors.push(RowError { row: i as u64 + 1, message: e.to_string() }),
        }
    }
    if errors.is_empty() {
        Ok(entries)
    } else {
        Err(DictionaryError::Rows(errors))
    }
}

pub fn dictionary_to_csv(entries: &[DataDictionaryEntry]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for e in entries {
        let m = &e.metadata;
        writer
            .serialize(CsvEntry {
                name: e.name.clone(),
                label: e.label.clone(),
                data_type: m.data_type.clone().unwrap_or_default(),
                scale: m.scale.map(|s| s.as_str().to_owned()).unwrap_or_default(),
                unit: m.unit.clone().unwrap_or_default(),
                formula: m.formula.clone().unwrap_or_default(),
                visit: m.visit.clone().unwrap_or_default(),
                categories: m.categories.join("|"),
            })
            .expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8")
}

pub fn dictionary_to_json(entries: &[DataDictionaryEntry]) -> String {
    serde_json::to_string_pretty(entries).expect("serializable")
}

/// Loads a dictionary file; `.json` files are arrays of records, anything
/// else is read as CSV.
pub fn load_dictionary(path: &Path) -> Result<Vec<DataDictionaryEntry>, DictionaryError> {
    let raw = std::fs::read(path)
        .map_err(|source| DictionaryError::Io { path: path.display().to_string(), source })?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        parse_dictionary_json(&String::from_utf8_lossy(&raw))
    } else {
        parse_dictionary_csv(&raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{FnLlm, HashingEmbedder};
    use std::sync::atomic::{AtomicU32, Ordering};

    fn entry(label: &str) -> DataDictionaryEntry {
        DataDictionaryEntry::new("v", label)
    }

    #[test]
    fn validate_trims_and_dedups() {
        let mut e = entry("  heart attack ");
        e.metadata.categories = vec!["Yes".into(), "Yes".into(), "No".into()];
        e.metadata.unit = Some("  ".into());
        let v = validate_input(&e).unwrap();
        assert_eq!(v.label, "heart attack");
        assert_eq!(v.metadata.categories, vec!["Yes", "No"]);
        assert_eq!(v.metadata.unit, None);
    }

    #[test]
    fn validate_rejects_empty_label() {
        assert!(matches!(validate_input(&entry("")), Err(DecomposeError::InvalidEntry(_))));
        assert!(matches!(validate_input(&entry("  \t")), Err(DecomposeError::InvalidEntry(_))));
    }

    #[test]
    fn category_codes_are_dropped() {
        assert_eq!(strip_category_code("0=No"), "No");
        assert_eq!(strip_category_code(" 9 = Missing "), "Missing");
        assert_eq!(strip_category_code("1: Yes"), "Yes");
        assert_eq!(strip_category_code("Yes"), "Yes");
        assert_eq!(strip_category_code("NYHA=II"), "NYHA=II");
    }

    #[test]
    fn components_follow_field_order() {
        let q = DecomposedQuery {
            refined_query: "x".into(),
            base_entity: "heart attack".into(),
            associated_entities: vec!["Hospitalization Reason".into()],
            categories: vec!["Yes".into(), "No".into()],
            visit: Some("baseline".into()),
            ..Default::default()
        };
        let names: Vec<_> = q.components().into_iter().map(|c| c.name).collect();
        assert_eq!(
            names,
            ["base_entity", "associated_entities[0]", "categories[0]", "categories[1]", "visit"]
        );
    }

    #[test]
    fn parse_completion_tolerates_fences_and_normalizes() {
        let text = "```json\n{\"base_entity\": \" heart  attack \", \"categories\": [\"1=Yes\", \"0=No\", \"yes\"], \"unit\": \"\", \"domain\": \"Condition\"}\n```";
        let q = parse_completion(text).unwrap();
        assert_eq!(q.base_entity, "heart attack");
        assert_eq!(q.refined_query, "heart attack");
        assert_eq!(q.categories, vec!["Yes", "No"]);
        assert_eq!(q.unit, None);
        assert_eq!(q.domain_hint.as_deref(), Some("Condition"));
    }

    #[test]
    fn parse_completion_rejects_missing_base() {
        assert!(parse_completion("{\"unit\": \"mg\"}").is_err());
        assert!(parse_completion("no json here").is_err());
        assert!(parse_completion("{\"base_entity\": 3}").is_err());
    }

    #[test]
    fn bare_terms_bypass_the_provider() {
        let calls = AtomicU32::new(0);
        let llm = FnLlm::new(|_| {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok("{}".into())
        });
        let embedder = HashingEmbedder::default();
        let d = decompose(
            &entry("sex"),
            &llm,
            &ExampleBank::default(),
            &embedder,
            &DecomposeOptions::default(),
        )
        .unwrap();
        assert_eq!(d.query.base_entity, "sex");
        assert_eq!(d.attempts, 0);
        assert_eq!(calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn retries_with_correction_until_valid() {
        let seen = std::sync::Mutex::new(Vec::new());
        let llm = FnLlm::new(|req| {
            let mut seen = seen.lock().unwrap();
            seen.push(req.prompt.to_owned());
            assert_eq!(req.temperature, 0.0);
            Ok(if seen.len() < 3 { "not json".into() } else { r#"{"base_entity":"x y z"}"#.into() })
        });
        let embedder = HashingEmbedder::default();
        let d = decompose(
            &entry("x y z w"),
            &llm,
            &ExampleBank::default(),
            &embedder,
            &DecomposeOptions::default(),
        )
        .unwrap();
        assert_eq!(d.attempts, 3);
        let seen = seen.into_inner().unwrap();
        assert!(!seen[0].contains(SECTION_CORRECTION));
        assert!(seen[1].contains("attempt 2 of 3"));
        assert!(seen[2].contains("attempt 3 of 3"));
    }

    #[test]
    fn exhausting_retries_is_a_failure() {
        let llm = FnLlm::new(|_| Ok("garbage".into()));
        let embedder = HashingEmbedder::default();
        let err = decompose(
            &entry("a b c d"),
            &llm,
            &ExampleBank::default(),
            &embedder,
            &DecomposeOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, DecomposeError::Failure { attempts: 3, .. }));
    }

    #[test]
    fn prompt_without_examples_or_rules() {
        let mut e = entry("troponin t level");
        e.metadata.unit = Some("pmol/L".into());
        let p = build_decomposition_prompt(&e, &[], "");
        assert!(p.contains(SECTION_TASK) && p.contains(SECTION_QUERY) && p.contains(SECTION_SCHEMA));
        assert!(!p.contains(SECTION_EXAMPLES) && !p.contains(SECTION_RULES));
        assert!(p.contains("pmol/L"));
    }

    #[test]
    fn select_examples_edge_cases() {
        let embedder = HashingEmbedder::default();
        let ex = |label: &str| BankExample {
            input: entry(label),
            output: DecomposedQuery::standalone(label),
        };
        let bank = ExampleBank::new(vec![ex("body weight"), ex("systolic blood pressure")], &embedder)
            .unwrap();
        assert!(select_examples(&entry("x"), &bank, 0, &embedder).unwrap().is_empty());
        let picked = select_examples(&entry("systolic blood pressure"), &bank, 5, &embedder).unwrap();
        assert_eq!(picked.len(), 2);
        assert_eq!(picked[0].input.label, "systolic blood pressure");
    }

    #[test]
    fn bank_rejects_unnormalized_gold() {
        let embedder = HashingEmbedder::default();
        let bad = BankExample {
            input: entry("x"),
            output: DecomposedQuery { base_entity: String::new(), ..Default::default() },
        };
        assert!(matches!(
            ExampleBank::new(vec![bad], &embedder),
            Err(DecomposeError::InvalidExample { index: 0, .. })
        ));
    }

    #[test]
    fn dictionary_csv_and_json_agree() {
        let csv = "name,label,data_type,scale,unit,formula,visit,categories\n\
                   hf,heart failure,categorical,nominal,,,baseline,0=No|1=Yes\n\
                   bnp,\"NT-proBNP, plasma\",numeric,continuous,pmol/L,,,\n";
        let from_csv = parse_dictionary_csv(csv.as_bytes()).unwrap();
        assert_eq!(from_csv[0].metadata.categories, vec!["0=No", "1=Yes"]);
        assert_eq!(from_csv[1].metadata.scale, Some(Scale::Continuous));
        let from_json = parse_dictionary_json(&dictionary_to_json(&from_csv)).unwrap();
        assert_eq!(from_json, from_csv);
        let again = parse_dictionary_csv(dictionary_to_csv(&from_json).as_bytes()).unwrap();
        assert_eq!(again, from_csv);
    }

    #[test]
    fn json_dictionary_reports_bad_rows() {
        let err = parse_dictionary_json(r#"[{"label":"ok"},{"name":"x"},{"label":"y","scale":"weird"}]"#)
            .unwrap_err();
        match err {
            DictionaryError::Rows(rows) => {
                assert_eq!(rows.iter().map(|r| r.row).collect::<Vec<_>>(), vec![2, 3]);
            }
            other => panic!("{other:?}"),
        }
    }
}
