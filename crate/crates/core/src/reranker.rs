//! Two-step LLM reranking with self-consistency voting.
//!
//! Each round asks the LLM to score every candidate from 1 to 10. Scores map
//! to relevance bands (audit only) and binarize at threshold `t`; a
//! candidate's confidence is its mean vote over `n` rounds. The best
//! candidate whose confidence exceeds `tau_rel` is selected, otherwise the
//! decision is NA.

use std::fmt::Write as _;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::provider::{CompletionRequest, LlmProvider, ProviderError, Task};
use crate::retrieval::Candidate;
use crate::vocab::OmopId;

pub const SECTION_TASK: &str = "### Task";
pub const SECTION_CANDIDATES: &str = "### Candidates";
pub const SECTION_QUERY: &str = "### Query";
pub const SECTION_OUTPUT: &str = "### Output format";
pub const SECTION_CORRECTION: &str = "### Correction";

const INSTRUCTION: &str = "You are linking a clinical query to a controlled-vocabulary concept. \
Rate how well each candidate concept represents the query on a scale from 1 (lowest) to 10 \
(highest). Scores 1-4 mean not relevant, 5-7 partially relevant, 8-9 highly relevant and 10 an \
exact match.";

const OUTPUT_FORMAT: &str =
    "Reply with one line per candidate in the form <number>:<score>, for example 1:9";

#[derive(Debug, Error)]
pub enum RerankError {
    #[error("score {0} is outside 1..=10")]
    OutOfRange(i64),
    #[error("invalid rerank config: {0}")]
    InvalidConfig(String),
    #[error("provider failure: {0}")]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RerankConfig {
    /// Rounds of prompting.
    pub n: u32,
    /// Binarization threshold: a round votes 1 when its score is at least `t`.
    pub t: u8,
    /// A candidate is relevant when its mean vote exceeds this fraction.
    pub tau_rel: f64,
    /// Round `j` (0-based) uses seed `base_seed + j`.
    pub base_seed: u64,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self { n: 3, t: 8, tau_rel: 0.85, base_seed: 0 }
    }
}

impl RerankConfig {
    pub fn validate(&self) -> Result<(), RerankError> {
        if self.n == 0 {
            return Err(RerankError::InvalidConfig("n must be at least 1".into()));
        }
        if !(1..=10).contains(&self.t) {
            return Err(RerankError::InvalidConfig(format!("t must lie in 1..=10, got {}", self.t)));
        }
        if !(self.tau_rel > 0.0 && self.tau_rel <= 1.0) {
            return Err(RerankError::InvalidConfig(format!(
                "tau_rel must lie in (0, 1], got {}",
                self.tau_rel
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelevanceCategory {
    NotRelevant,
    PartiallyRelevant,
    HighlyRelevant,
    ExactMatch,
}

/// 1-4 not relevant, 5-7 partially, 8-9 highly, 10 exact match.
pub fn classify(score: i64) -> Result<RelevanceCategory, RerankError> {
    match score {
        1..=4 => Ok(RelevanceCategory::NotRelevant),
        5..=7 => Ok(RelevanceCategory::PartiallyRelevant),
        8..=9 => Ok(RelevanceCategory::HighlyRelevant),
        10 => Ok(RelevanceCategory::ExactMatch),
        other => Err(RerankError::OutOfRange(other)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub candidate: Candidate,
    pub relevance_scores: Vec<u8>,
    pub categories: Vec<RelevanceCategory>,
    pub binary_votes: Vec<u8>,
    pub confidence: f64,
}

impl ScoredCandidate {
    pub fn from_scores(candidate: Candidate, scores: Vec<u8>, t: u8) -> Self {
        let categories =
            scores.iter().map(|&s| classify(s as i64).expect("scores are in range")).collect();
        let binary_votes: Vec<u8> = scores.iter().map(|&s| u8::from(s >= t)).collect();
        let confidence = if binary_votes.is_empty() {
            0.0
        } else {
            binary_votes.iter().map(|&b| b as f64).sum::<f64>() / binary_votes.len() as f64
        };
        Self { candidate, relevance_scores: scores, categories, binary_votes, confidence }
    }

    pub fn mean_score(&self) -> f64 {
        if self.relevance_scores.is_empty() {
            return 0.0;
        }
        self.score_sum() as f64 / self.relevance_scores.len() as f64
    }

    fn score_sum(&self) -> u32 {
        self.relevance_scores.iter().map(|&s| s as u32).sum()
    }

    fn vote_sum(&self) -> u32 {
        self.binary_votes.iter().map(|&b| b as u32).sum()
    }
}

/// Outcome of reranking one component. `NA` serializes as the string `"NA"`.
#[derive(Debug, Clone, PartialEq)]
pub enum MatchDecision {
    Match { omop_id: OmopId, confidence: f64, mean_score: f64 },
    Na,
}

impl MatchDecision {
    pub fn is_na(&self) -> bool {
        matches!(self, MatchDecision::Na)
    }

    pub fn omop_id(&self) -> Option<OmopId> {
        match self {
            MatchDecision::Match { omop_id, .. } => Some(*omop_id),
            MatchDecision::Na => None,
        }
    }
}

impl Serialize for MatchDecision {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Selected {
            omop_id: OmopId,
            confidence: f64,
            mean_score: f64,
        }
        match self {
            MatchDecision::Na => s.serialize_str("NA"),
            MatchDecision::Match { omop_id, confidence, mean_score } => Selected {
                omop_id: *omop_id,
                confidence: *confidence,
                mean_score: *mean_score,
            }
            .serialize(s),
        }
    }
}

fn candidate_line(index: usize, c: &Candidate, out: &mut String) {
    let _ = write!(out, "{}. {} [vocabulary: {}", index + 1, c.name, c.vocabulary);
    if let Some(st) = &c.semantic_type {
        let _ = write!(out, "; semantic type: {st}");
    }
    let _ = writeln!(out, "; matched: {}]", c.matched_surface);
}

/// Instruction (plus directives), numbered candidates, query, output format.
pub fn build_rerank_prompt(query: &str, candidates: &[Candidate], directives: &[String]) -> String {
    let mut p = String::new();
    let _ = writeln!(p, "{SECTION_TASK}\n{INSTRUCTION}");
    if !directives.is_empty() {
        let _ = writeln!(p, "Directives: {}", directives.join(", "));
    }
    let _ = writeln!(p, "\n{SECTION_CANDIDATES}");
    for (i, c) in candidates.iter().enumerate() {
        candidate_line(i, c, &mut p);
    }
    let _ = writeln!(p, "\n{SECTION_QUERY}\n{query}\n\n{SECTION_OUTPUT}\n{OUTPUT_FORMAT}");
    p
}

static SCORE_PAIR: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(\d+)\s*[:=]\s*(\d+)").unwrap());

/// Per-candidate scores from a completion; `None` where a score is missing
/// or outside 1..=10. The first score given for a number wins.
pub fn parse_scores(text: &str, count: usize) -> Vec<Option<u8>> {
    let mut out = vec![None; count];
    let mut seen = vec![false; count];
    for caps in SCORE_PAIR.captures_iter(text) {
        let (Ok(idx), Ok(score)) = (caps[1].parse::<usize>(), caps[2].parse::<u32>()) else {
            continue;
        };
        if idx == 0 || idx > count || seen[idx - 1] {
            continue;
        }
        seen[idx - 1] = true;
        if (1..=10).contains(&score) {
            out[idx - 1] = Some(score as u8);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundScores {
    pub scores: Vec<u8>,
    pub reprompted: bool,
    pub provider_calls: u32,
}

fn correction(base: &str, count: usize) -> String {
    format!(
        "{base}\n{SECTION_CORRECTION}\nYour previous answer was missing scores or used scores \
         outside 1-10. Reply with exactly one <number>:<score> line for each of the {count} \
         candidates.\n"
    )
}

/// One scoring round. An incomplete answer is reprompted once; scores still
/// missing after that become 1.
pub fn score_round(
    query: &str,
    candidates: &[Candidate],
    directives: &[String],
    llm: &dyn LlmProvider,
    seed: Option<u64>,
) -> Result<RoundScores, RerankError> {
    if candidates.is_empty() {
        return Ok(RoundScores { scores: Vec::new(), reprompted: false, provider_calls: 0 });
    }
    let prompt = build_rerank_prompt(query, candidates, directives);
    let first = llm.complete(&CompletionRequest::new(Task::Rerank, &prompt).with_seed(seed))?;
    let parsed = parse_scores(&first, candidates.len());
    if parsed.iter().all(Option::is_some) {
        return Ok(RoundScores {
            scores: parsed.into_iter().flatten().collect(),
            reprompted: false,
            provider_calls: 1,
        });
    }
    let retry_prompt = correction(&prompt, candidates.len());
    let second =
        llm.complete(&CompletionRequest::new(Task::Rerank, &retry_prompt).with_seed(seed))?;
    let retried = parse_scores(&second, candidates.len());
    let scores = retried
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            s.unwrap_or_else(|| {
                tracing::warn!(query, candidate = i + 1, "no usable score after reprompt; using 1");
                1
            })
        })
        .collect();
    Ok(RoundScores { scores, reprompted: true, provider_calls: 2 })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfConsistency {
    pub scored: Vec<ScoredCandidate>,
    pub provider_calls: u32,
    pub reprompts: u32,
    pub failed_rounds: u32,
}

/// Runs `n` scoring rounds with seeds `base_seed + j` and aggregates votes.
///
/// A round that fails in transport is retried once; if it fails again its
/// scores are recorded as 1 (vote 0). When every round fails the last
/// error is returned.
pub fn self_consistency(
    query: &str,
    candidates: &[Candidate],
    directives: &[String],
    llm: &dyn LlmProvider,
    config: &RerankConfig,
) -> Result<SelfConsistency, RerankError> {
    config.validate()?;
    let mut rounds: Vec<Vec<u8>> = Vec::with_capacity(config.n as usize);
    let mut provider_calls = 0;
    let mut reprompts = 0;
    let mut failed_rounds = 0;
    let mut last_error = None;
    if candidates.is_empty() {
        return Ok(SelfConsistency { scored: Vec::new(), provider_calls, reprompts, failed_rounds });
    }
    for j in 0..config.n {
        let seed = Some(config.base_seed + j as u64);
        let mut outcome = score_round(query, candidates, directives, llm, seed);
        if let Err(RerankError::Provider(err)) = &outcome {
            tracing::warn!(query, round = j, error = %err, "rerank round failed; retrying");
            provider_calls += 1;
            outcome = score_round(query, candidates, directives, llm, seed);
        }
        match outcome {
            Ok(round) => {
                provider_calls += round.provider_calls;
                reprompts += u32::from(round.reprompted);
                rounds.push(round.scores);
            }
            Err(err) => {
                tracing::warn!(query, round = j, error = %err, "rerank round failed twice");
                provider_calls += 1;
                failed_rounds += 1;
                rounds.push(vec![1; candidates.len()]);
                last_error = Some(err);
            }
        }
    }
    if failed_rounds == config.n {
        return Err(last_error.expect("failed rounds record their error"));
    }
    let scored = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let scores = rounds.iter().map(|r| r[i]).collect();
            ScoredCandidate::from_scores(c.clone(), scores, config.t)
        })
        .collect();
    Ok(SelfConsistency { scored, provider_calls, reprompts, failed_rounds })
}

/// Highest-confidence candidate among those with confidence above
/// `tau_rel`; ties go to the higher mean score, then the lower omop_id.
pub fn select_top(scored: &[ScoredCandidate], config: &RerankConfig) -> MatchDecision {
    let best = scored
        .iter()
        .filter(|s| s.confidence > config.tau_rel)
        .max_by(|a, b| {
            a.vote_sum()
                .cmp(&b.vote_sum())
                .then(a.score_sum().cmp(&b.score_sum()))
                .then(b.candidate.omop_id.cmp(&a.candidate.omop_id))
        });
    match best {
        Some(s) => MatchDecision::Match {
            omop_id: s.candidate.omop_id,
            confidence: s.confidence,
            mean_score: s.mean_score(),
        },
        None => MatchDecision::Na,
    }
}

/// Candidates ordered by confidence, mean score, then omop_id. Used as the
/// final ranking for evaluation.
pub fn ranking(scored: &[ScoredCandidate]) -> Vec<OmopId> {
    let mut order: Vec<&ScoredCandidate> = scored.iter().collect();
    order.sort_by(|a, b| {
        b.vote_sum()
            .cmp(&a.vote_sum())
            .then(b.score_sum().cmp(&a.score_sum()))
            .then(a.candidate.omop_id.cmp(&b.candidate.omop_id))
    });
    order.into_iter().map(|s| s.candidate.omop_id).collect()
}
