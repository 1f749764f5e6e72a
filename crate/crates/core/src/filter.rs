//! Knowledge filter: vocabulary routing rules and the similarity threshold.
//!
//! Routing removes candidates whose vocabulary is not allowed for the
//! query's domain. Context rules never remove anything; they tag surviving
//! candidates with directives that the reranker prompt carries forward.
//! The similarity filter drops candidates whose surface embedding is less
//! similar to the query than `tau`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::provider::{EmbeddingProvider, ProviderError};
use crate::retrieval::Candidate;
use crate::text::normalize_surface;
use crate::vocab::ConceptStore;

pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("cannot read rules file {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("invalid rules: {0}")]
    InvalidRules(String),
    #[error("route for domain {domain:?} names unknown vocabulary {vocabulary:?}")]
    UnknownVocabulary { domain: String, vocabulary: String },
    #[error("tau must lie in [0, 1], got {0}")]
    InvalidTau(f64),
    #[error("provider failure: {0}")]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub domain: String,
    /// Allowed vocabularies, most preferred first.
    pub vocabularies: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextRule {
    pub pattern: String,
    pub directive: String,
}

/// Versioned routing and context rules, loaded from a JSON file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkingRules {
    #[serde(default = "one")]
    pub version: u32,
    #[serde(default)]
    pub routes: Vec<Route>,
    #[serde(default)]
    pub context_rules: Vec<ContextRule>,
}

fn one() -> u32 {
    1
}

impl Default for LinkingRules {
    fn default() -> Self {
        let route = |domain: &str, vocabs: &[&str]| Route {
            domain: domain.into(),
            vocabularies: vocabs.iter().map(|v| v.to_string()).collect(),
        };
        Self {
            version: 1,
            routes: vec![
                route("Condition", &["SNOMED"]),
                route("Drug", &["RxNorm", "ATC"]),
                route("Measurement", &["LOINC", "SNOMED"]),
                route("Unit", &["UCUM"]),
            ],
            context_rules: vec![ContextRule {
                pattern: "history of".into(),
                directive: "past-condition".into(),
            }],
        }
    }
}

impl LinkingRules {
    /// Rules with no routes and no context rules: everything passes.
    pub fn empty() -> Self {
        Self { version: 1, routes: Vec::new(), context_rules: Vec::new() }
    }

    pub fn from_json(text: &str) -> Result<Self, FilterError> {
        let rules: Self =
            serde_json::from_str(text).map_err(|e| FilterError::InvalidRules(e.to_string()))?;
        rules.check_shape()?;
        Ok(rules)
    }

    pub fn load(path: &Path) -> Result<Self, FilterError> {
        let text = std::fs::read_to_string(path).map_err(|e| FilterError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("serializable");
        out.push('\n');
        out
    }

    fn check_shape(&self) -> Result<(), FilterError> {
        for route in &self.routes {
            if route.domain.trim().is_empty() {
                return Err(FilterError::InvalidRules("route with empty domain".into()));
            }
        }
        for rule in &self.context_rules {
            if rule.pattern.trim().is_empty() {
                return Err(FilterError::InvalidRules("context rule with empty pattern".into()));
            }
            if rule.directive.trim().is_empty() {
                return Err(FilterError::InvalidRules(format!(
                    "context rule {:?} has an empty directive",
                    rule.pattern
                )));
            }
        }
        Ok(())
    }

    /// Checks that every routed vocabulary exists in `store`.
    pub fn validate(&self, store: &ConceptStore) -> Result<(), FilterError> {
        self.check_shape()?;
        let known: Vec<String> = store.vocabularies().iter().map(|v| v.to_lowercase()).collect();
        for route in &self.routes {
            for vocabulary in &route.vocabularies {
                if !known.contains(&vocabulary.to_lowercase()) {
                    return Err(FilterError::UnknownVocabulary {
                        domain: route.domain.clone(),
                        vocabulary: vocabulary.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn route(&self, domain: &str) -> Option<&Route> {
        self.routes.iter().find(|r| r.domain.eq_ignore_ascii_case(domain.trim()))
    }

    /// Directives whose pattern occurs in `context` (case-folded), in rule order.
    pub fn directives_for(&self, context: &str) -> Vec<String> {
        let context = normalize_surface(context);
        let mut out: Vec<String> = Vec::new();
        for rule in &self.context_rules {
            if context.contains(&normalize_surface(&rule.pattern)) && !out.contains(&rule.directive) {
                out.push(rule.directive.clone());
            }
        }
        out
    }

    /// Plain-text rendering used in the decomposition prompt.
    pub fn to_prompt_text(&self) -> String {
        let mut out = String::new();
        for route in &self.routes {
            let _ = writeln!(
                out,
                "- {} terms link to {}.",
                route.domain,
                route.vocabularies.join(", then ")
            );
        }
        for rule in &self.context_rules {
            let _ = writeln!(out, "- Text containing {:?} calls for {}.", rule.pattern, rule.directive);
        }
        out
    }
}

/// Rank of `vocabulary` in the route for `domain`, if routed.
pub fn route_preference(rules: &LinkingRules, domain: Option<&str>, vocabulary: &str) -> Option<usize> {
    let route = rules.route(domain?)?;
    route.vocabularies.iter().position(|v| v.eq_ignore_ascii_case(vocabulary))
}

/// Drops candidates outside the route for `domain_hint` (order preserved)
/// and tags survivors with the directives triggered by `context`.
/// Unrouted or absent domains pass every candidate through.
pub fn apply_linking_rules(
    candidates: Vec<Candidate>,
    domain_hint: Option<&str>,
    rules: &LinkingRules,
    context: &str,
) -> Vec<Candidate> {
    let route = match domain_hint {
        Some(domain) => {
            let route = rules.route(domain);
            if route.is_none() {
                tracing::warn!(domain, "no linking route for domain; passing candidates through");
            }
            route
        }
        None => None,
    };
    let directives = rules.directives_for(context);
    candidates
        .into_iter()
        .filter(|c| {
            let keep = route.map_or(true, |r| {
                r.vocabularies.iter().any(|v| v.eq_ignore_ascii_case(&c.vocabulary))
            });
            if !keep {
                tracing::info!(
                    omop_id = c.omop_id,
                    vocabulary = %c.vocabulary,
                    domain = domain_hint.unwrap_or_default(),
                    "candidate dropped by linking route"
                );
            }
            keep
        })
        .map(|mut c| {
            for d in &directives {
                if !c.directives.contains(d) {
                    c.directives.push(d.clone());
                }
            }
            c
        })
        .collect()
}

/// Removes candidates whose matched surface has cosine similarity to
/// `query` strictly below `tau`. Survivors keep their order and record
/// their similarity.
pub fn filter_by_similarity(
    candidates: Vec<Candidate>,
    query: &str,
    provider: &dyn EmbeddingProvider,
    tau: f64,
) -> Result<Vec<Candidate>, FilterError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(FilterError::InvalidTau(tau));
    }
    if candidates.is_empty() {
        return Ok(candidates);
    }
    let q = provider.embed_dense(query)?;
    let surfaces: Vec<&str> = candidates.iter().map(|c| c.matched_surface.as_str()).collect();
    let vectors = provider.embed_dense_batch(&surfaces)?;
    Ok(candidates
        .into_iter()
        .zip(vectors)
        .filter_map(|(mut c, v)| {
            let sim = q.cosine(&v);
            c.similarity = Some(sim);
            (sim >= tau).then_some(c)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::provider::HashingEmbedder;
    use crate::retrieval::Source;

    fn cand(id: i64, surface: &str, vocabulary: &str) -> Candidate {
        Candidate {
            omop_id: id,
            name: surface.into(),
            code: id.to_string(),
            vocabulary: vocabulary.into(),
            semantic_type: None,
            matched_surface: surface.into(),
            dense_score: Some(0.5),
            sparse_score: None,
            fused_score: 1.0 / 61.0,
            sources: BTreeSet::from([Source::Dense]),
            similarity: None,
            directives: vec![],
        }
    }

    #[test]
    fn condition_route_drops_drug_vocabularies() {
        let rules = LinkingRules::default();
        let input = vec![
            cand(100, "myocardial infarction", "SNOMED"),
            cand(301, "carvedilol", "RxNorm"),
            cand(200, "fear of heart attack", "SNOMED"),
        ];
        let out = apply_linking_rules(input, Some("condition"), &rules, "heart attack");
        assert_eq!(out.iter().map(|c| c.omop_id).collect::<Vec<_>>(), vec![100, 200]);
    }

    #[test]
    fn absent_hint_passes_through() {
        let input = vec![cand(1, "a", "X"), cand(2, "b", "Y")];
        let out = apply_linking_rules(input.clone(), None, &LinkingRules::default(), "a");
        assert_eq!(out, input);
        let out = apply_linking_rules(input.clone(), Some("Nope"), &LinkingRules::default(), "a");
        assert_eq!(out, input);
    }

    #[test]
    fn history_of_tags_past_condition() {
        let input = vec![cand(1, "myocardial infarction", "SNOMED")];
        let once = apply_linking_rules(
            input,
            Some("Condition"),
            &LinkingRules::default(),
            "History of myocardial infraction",
        );
        assert_eq!(once[0].directives, vec!["past-condition"]);
        let twice = apply_linking_rules(
            once.clone(),
            Some("Condition"),
            &LinkingRules::default(),
            "History of myocardial infraction",
        );
        assert_eq!(once, twice);
    }

    #[test]
    fn similarity_boundary_is_strict() {
        let e = HashingEmbedder::default();
        let out = filter_by_similarity(vec![cand(1, "heart attack", "X")], "heart attack", &e, 1.0)
            .unwrap();
        assert_eq!(out.len(), 1);
        assert!((out[0].similarity.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tau_zero_keeps_everything() {
        let e = HashingEmbedder::default();
        let input = vec![cand(1, "heart attack", "X"), cand(2, "carvedilol", "X")];
        let out = filter_by_similarity(input, "heart attack", &e, 0.0).unwrap();
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn invalid_tau_rejected() {
        let e = HashingEmbedder::default();
        assert!(matches!(
            filter_by_similarity(vec![], "x", &e, 1.5),
            Err(FilterError::InvalidTau(_))
        ));
    }

    #[test]
    fn rules_json_round_trip_and_validation() {
        let rules = LinkingRules::default();
        assert_eq!(LinkingRules::from_json(&rules.to_json()).unwrap(), rules);
        assert!(LinkingRules::from_json(r#"{"context_rules":[{"pattern":" ","directive":"x"}]}"#)
            .is_err());
        let store = ConceptStore::default();
        assert!(matches!(rules.validate(&store), Err(FilterError::UnknownVocabulary { .. })));
        assert!(LinkingRules::empty().validate(&store).is_ok());
    }

    #[test]
    fn route_preference_follows_order() {
        let rules = LinkingRules::default();
        assert_eq!(route_preference(&rules, Some("Drug"), "atc"), Some(1));
        assert_eq!(route_preference(&rules, Some("Drug"), "RxNorm"), Some(0));
        assert_eq!(route_preference(&rules, None, "RxNorm"), None);
    }
}
