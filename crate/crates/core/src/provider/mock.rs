use std::sync::LazyLock;

use regex::Regex;
use serde_json::json;

use super::{CompletionRequest, HashingEmbedder, LlmProvider, ProviderError, Task};
use crate::decomposer::strip_category_code;
use crate::text::{collapse_whitespace, normalize_surface};

/// Deterministic offline stand-in for an LLM, used by the `mock` provider.
///
/// It reads the prompts this crate builds and answers from string
/// heuristics: decompositions split the label on `" - "` and comma
/// clauses, rerank scores are `1 + round(9 * similarity)` of trigram
/// embeddings, and judge verdicts threshold the same similarity. Output
/// ignores the seed, so every self-consistency round agrees.
#[derive(Debug, Clone, Default)]
pub struct HeuristicLlm {
    embedder: HashingEmbedder,
}

static CANDIDATE_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(\d+)\. (.+) \[(.*)\]$").unwrap());

fn section<'p>(prompt: &'p str, header: &str) -> Vec<&'p str> {
    let mut lines = prompt.lines().skip_while(|l| l.trim() != header);
    if lines.next().is_none() {
        return Vec::new();
    }
    lines.take_while(|l| !l.starts_with("### ")).filter(|l| !l.trim().is_empty()).collect()
}

fn field<'p>(lines: &[&'p str], key: &str) -> Option<&'p str> {
    lines.iter().find_map(|l| l.strip_prefix(key)?.strip_prefix(": ")).map(str::trim)
}

impl HeuristicLlm {
    pub fn new() -> Self {
        Self::default()
    }

    fn similarity(&self, a: &str, b: &str) -> f64 {
        if normalize_surface(a) == normalize_surface(b) {
            return 1.0;
        }
        self.embedder.similarity(a, b)
    }

    fn decompose(&self, prompt: &str) -> Result<String, ProviderError> {
        let query = section(prompt, "### Query");
        let label = field(&query, "label")
            .ok_or_else(|| ProviderError::InvalidResponse("prompt has no query label".into()))?;
        let (head, rest) = match label.split_once(" - ") {
            Some((h, r)) => (h.trim(), r.trim()),
            None => (label, ""),
        };
        let mut categories: Vec<String> = Vec::new();
        let mut visit = field(&query, "visit").map(str::to_owned);
        let mut associated = Vec::new();
        let lower = rest.to_lowercase();
        let (clauses, cats) = match lower.find("categories include") {
            Some(i) => (&rest[..i], Some(&rest[i + "categories include".len()..])),
            None => (rest, None),
        };
        if let Some(cats) = cats {
            categories.extend(
                cats.split(',')
                    .map(|c| strip_category_code(c.trim()).to_owned())
                    .filter(|c| !c.is_empty()),
            );
        }
        for clause in clauses.split(',').map(str::trim).filter(|c| !c.is_empty()) {
            let lc = clause.to_lowercase();
            if let Some(v) = lc.strip_prefix("measured at ") {
                visit.get_or_insert_with(|| clause[clause.len() - v.len()..].trim().to_owned());
            } else {
                associated.push(collapse_whitespace(clause));
            }
        }
        if let Some(listed) = field(&query, "categories") {
            for c in listed.split(" | ") {
                let c = strip_category_code(c).to_owned();
                if !categories.contains(&c) {
                    categories.push(c);
                }
            }
        }
        let unit = field(&query, "unit");
        let out = json!({
            "refined_query": label,
            "base_entity": head,
            "associated_entities": associated,
            "categories": categories,
            "unit": unit,
            "visit": visit,
            "method": null,
            "formula": field(&query, "formula"),
            "domain": unit.map(|_| "Measurement"),
        });
        Ok(out.to_string())
    }

    fn rerank(&self, prompt: &str) -> String {
        let query = section(prompt, "### Query").first().copied().unwrap_or_default();
        let mut out = Vec::new();
        for line in section(prompt, "### Candidates") {
            let Some(caps) = CANDIDATE_LINE.captures(line.trim()) else {
                continue;
            };
            let name = &caps[2];
            let matched = caps[3].split("; ").find_map(|p| p.strip_prefix("matched: "));
            let sim = matched
                .map_or(0.0, |m| self.similarity(query, m))
                .max(self.similarity(query, name));
            let score = (1.0 + (9.0 * sim).round()).clamp(1.0, 10.0) as u8;
            out.push(format!("{}:{score}", &caps[1]));
        }
        out.join("\n")
    }

    fn judge(&self, prompt: &str) -> String {
        let term = section(prompt, "### Term").first().copied().unwrap_or_default();
        let concept = section(prompt, "### Concept").first().copied().unwrap_or_default();
        let (name, details) = concept.split_once(" [").unwrap_or((concept, ""));
        let aka = details
            .trim_end_matches(']')
            .split("; ")
            .find_map(|p| p.strip_prefix("also known as: "));
        let sim = aka.map_or(0.0, |a| self.similarity(term, a)).max(self.similarity(term, name));
        if sim >= 0.6 {
            "correct".into()
        } else if sim >= 0.3 {
            "partially correct".into()
        } else {
            "incorrect".into()
        }
    }
}

impl LlmProvider for HeuristicLlm {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ProviderError> {
        match request.task {
            Task::Decompose => self.decompose(request.prompt),
            Task::Rerank => Ok(self.rerank(request.prompt)),
            Task::Judge => Ok(self.judge(request.prompt)),
        }
    }
}
