//! Ranking metrics (acc@k, NCGD@k) and decomposition precision/recall.
//!
//! NCGD@k is computed as normalized discounted cumulative gain with binary
//! relevance: `DCG@k = Σ_{i≤k} rel_i / log2(i + 1)` divided by the ideal
//! DCG for the same number of relevant ids.
//!
//! A gold row may list several ids for a joint concept; it counts as a hit
//! at k only when every listed id is in the top k.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decomposer::DecomposedQuery;
use crate::pipeline::MappingResult;
use crate::text::normalize_surface;
use crate::vocab::OmopId;

/// Minimum normalized edit similarity for a fuzzy value match.
pub const FUZZY_THRESHOLD: f64 = 0.8;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("result for {label:?} carries no ranking; rerun the mapping with --trace")]
    MissingRanking { label: String },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("predicted and gold lists differ in length ({predicted} vs {gold})")]
    LengthMismatch { predicted: usize, gold: usize },
    #[error("gold file row {row}: {reason}")]
    BadGold { row: u64, reason: String },
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldMapping {
    pub label: String,
    /// Component key (`base_entity`, `categories[1]`, ...) or component text.
    pub component: String,
    pub gold_omop_ids: BTreeSet<OmopId>,
}

/// Final candidate ranking of one component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedComponent {
    pub label: String,
    pub component: String,
    pub text: String,
    pub ranking: Vec<OmopId>,
}

#[derive(Debug, Deserialize)]
struct GoldRow {
    label: String,
    component: String,
    gold_omop_ids: String,
}

pub fn parse_gold_csv(raw: &[u8]) -> Result<Vec<GoldMapping>, EvalError> {
    let mut reader = csv::Reader::from_reader(raw);
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<GoldRow>().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| EvalError::BadGold { row: line, reason: e.to_string() })?;
        let ids = row
            .gold_omop_ids
            .split('|')
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<OmopId>()
                    .map_err(|_| EvalError::BadGold { row: line, reason: format!("bad omop_id {s:?}") })
            })
            .collect::<Result<BTreeSet<_>, _>>()?;
        if ids.is_empty() {
            return Err(EvalError::BadGold { row: line, reason: "empty gold id set".into() });
        }
        out.push(GoldMapping { label: row.label, component: row.component, gold_omop_ids: ids });
    }
    Ok(out)
}

pub fn load_gold(path: &Path) -> Result<Vec<GoldMapping>, EvalError> {
    let raw = std::fs::read(path)
        .map_err(|e| EvalError::Io { path: path.display().to_string(), reason: e.to_string() })?;
    parse_gold_csv(&raw)
}

/// Per-component final rankings from traced mapping results.
pub fn rankings(results: &[MappingResult]) -> Result<Vec<RankedComponent>, EvalError> {
    let mut out = Vec::new();
    for result in results {
        let trace = result
            .trace
            .as_ref()
            .ok_or_else(|| EvalError::MissingRanking { label: result.label.clone() })?;
        for (name, component) in &trace.components {
            out.push(RankedComponent {
                label: result.label.clone(),
                component: name.clone(),
                text: component.text.clone(),
                ranking: component.ranking.clone(),
            });
        }
    }
    Ok(out)
}

fn ranking_for<'r>(ranked: &'r [RankedComponent], gold: &GoldMapping) -> &'r [OmopId] {
    let label = normalize_surface(&gold.label);
    let component = normalize_surface(&gold.component);
    let same_label = || ranked.iter().filter(|r| normalize_surface(&r.label) == label);
    same_label()
        .find(|r| normalize_surface(&r.component) == component)
        .or_else(|| same_label().find(|r| normalize_surface(&r.text) == component))
        .map_or(&[], |r| r.ranking.as_slice())
}

fn positions(ranking: &[OmopId]) -> HashMap<OmopId, usize> {
    let mut pos = HashMap::new();
    for (i, id) in ranking.iter().enumerate() {
        pos.entry(*id).or_insert(i + 1);
    }
    pos
}

/// Whether every gold id appears in the top `k` of `ranking`.
pub fn hit_at_k(ranking: &[OmopId], gold: &BTreeSet<OmopId>, k: usize) -> bool {
    let top: BTreeSet<OmopId> = ranking.iter().take(k).copied().collect();
    gold.is_subset(&top)
}

/// Binary-relevance NDCG@k of one ranking.
pub fn ndcg_single(ranking: &[OmopId], gold: &BTreeSet<OmopId>, k: usize) -> f64 {
    let pos = positions(ranking);
    let dcg: f64 = gold
        .iter()
        .filter_map(|id| pos.get(id))
        .filter(|&&p| p <= k)
        .map(|&p| 1.0 / ((p + 1) as f64).log2())
        .sum();
    let ideal: f64 = (1..=gold.len().min(k)).map(|i| 1.0 / ((i + 1) as f64).log2()).sum();
    if ideal == 0.0 {
        0.0
    } else {
        dcg / ideal
    }
}

/// Fraction of gold rows that are hits at `k`.
pub fn acc_at_k(ranked: &[RankedComponent], gold: &[GoldMapping], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    if gold.is_empty() {
        return Ok(0.0);
    }
    let hits = gold.iter().filter(|g| hit_at_k(ranking_for(ranked, g), &g.gold_omop_ids, k)).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Mean binary-relevance NDCG@k over gold rows (reported as NCGD@k).
pub fn ncgd_at_k(ranked: &[RankedComponent], gold: &[GoldMapping], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    if gold.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = gold.iter().map(|g| ndcg_single(ranking_for(ranked, g), &g.gold_omop_ids, k)).sum();
    Ok(total / gold.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(true_positive: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |num: usize, den: usize, empty: f64| if den == 0 { empty } else { num as f64 / den as f64 };
        let both_empty = if predicted == 0 && gold == 0 { 1.0 } else { 0.0 };
        let precision = ratio(true_positive, predicted, both_empty);
        let recall = ratio(true_positive, gold, both_empty);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionScores {
    pub attribute: Prf,
    pub value: Prf,
}

/// Non-empty fields of a decomposition with their values.
pub fn attributes(q: &DecomposedQuery) -> Vec<(&'static str, Vec<&str>)> {
    let mut out = Vec::new();
    if !q.base_entity.is_empty() {
        out.push(("base_entity", vec![q.base_entity.as_str()]));
    }
    let lists = [("associated_entities", &q.associated_entities), ("categories", &q.categories)];
    for (name, values) in lists {
        if !values.is_empty() {
            out.push((name, values.iter().map(String::as_str).collect()));
        }
    }
    let singles = [
        ("unit", &q.unit),
        ("visit", &q.visit),
        ("method", &q.method),
        ("formula", &q.formula),
        ("domain", &q.domain_hint),
    ];
    for (name, value) in singles {
        if let Some(v) = value {
            out.push((name, vec![v.as_str()]));
        }
    }
    out
}

/// Normalized Levenshtein similarity of the case-folded, whitespace
/// collapsed strings.
pub fn fuzzy_similarity(a: &str, b: &str) -> f64 {
    strsim::normalized_levenshtein(&normalize_surface(a), &normalize_surface(b))
}

pub fn fuzzy_match(predicted: &str, gold: &str) -> bool {
    fuzzy_similarity(predicted, gold) >= FUZZY_THRESHOLD
}

/// Attribute scores count field presence; value scores match predicted to
/// gold values within the same field (so a base entity only counts when it
/// sits in `base_entity`), each gold value used at most once.
pub fn decomposition_scores(
    predicted: &[DecomposedQuery],
    gold: &[DecomposedQuery],
) -> Result<DecompositionScores, EvalError> {
    if predicted.len() != gold.len() {
        return Err(EvalError::LengthMismatch { predicted: predicted.len(), gold: gold.len() });
    }
    let (mut attr_tp, mut attr_pred, mut attr_gold) = (0, 0, 0);
    let (mut val_tp, mut val_pred, mut val_gold) = (0, 0, 0);
    for (p, g) in predicted.iter().zip(gold) {
        let pa = attributes(p);
        let ga = attributes(g);
        attr_pred += pa.len();
        attr_gold += ga.len();
        val_pred += pa.iter().map(|(_, v)| v.len()).sum::<usize>();
        val_gold += ga.iter().map(|(_, v)| v.len()).sum::<usize>();
        for (name, pvalues) in &pa {
            let Some((_, gvalues)) = ga.iter().find(|(n, _)| n == name) else {
                continue;
            };
            attr_tp += 1;
            let mut used = vec![false; gvalues.len()];
            for pv in pvalues {
                if let Some(j) = (0..gvalues.len()).find(|&j| !used[j] && fuzzy_match(pv, gvalues[j])) {
                    used[j] = true;
                    val_tp += 1;
                }
            }
        }
    }
    Ok(DecompositionScores {
        attribute: Prf::from_counts(attr_tp, attr_pred, attr_gold),
        value: Prf::from_counts(val_tp, val_pred, val_gold),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub k: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub gold_rows: usize,
    pub records: Vec<MetricRecord>,
}

pub fn evaluate(results: &[MappingResult], gold: &[GoldMapping], ks: &[usize]) -> Result<EvalReport, EvalError> {
    let ranked = rankings(results)?;
    let mut records = Vec::new();
    for &k in ks {
        records.push(MetricRecord { metric: "acc".into(), k, value: acc_at_k(&ranked, gold, k)? });
    }
    for &k in ks {
        records.push(MetricRecord { metric: "ncgd".into(), k, value: ncgd_at_k(&ranked, gold, k)? });
    }
    Ok(EvalReport { gold_rows: gold.len(), records })
}

impl EvalReport {
    /// One table per metric.
    pub fn to_text(&self) -> String {
        let mut out = format!("gold rows: {}\n", self.gold_rows);
        let mut metrics: Vec<&str> = Vec::new();
        for r in &self.records {
            if !metrics.contains(&r.metric.as_str()) {
                metrics.push(&r.metric);
            }
        }
        for m in metrics {
            let title = if m == "ncgd" { "NCGD@k (binary-relevance NDCG)" } else { "acc@k" };
            let _ = writeln!(out, "\n{title}\n  k  value");
            for r in self.records.iter().filter(|r| r.metric == m) {
                let _ = writeln!(out, "{:>3}  {:.4}", r.k, r.value);
            }
        }
        out
    }
}
