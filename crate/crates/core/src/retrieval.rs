//! Dense and sparse search spaces over the concept store, and merged
//! (rank-fused) candidate retrieval.
//!
//! Every surface form of every concept gets its own dense vector and its own
//! sparse posting, so a concept can be found under any of its synonyms.
//! Dense vectors embed the surface together with the concept's semantic type
//! and parent names; sparse postings embed the bare surface for keyword
//! matching. Search is exact: every stored vector is scored.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::provider::{DenseVector, EmbeddingProvider, ProviderError, SparseVector};
use crate::text::normalize_surface;
use crate::vocab::{Concept, ConceptStore, OmopId};

/// Reciprocal-rank-fusion constant.
pub const RRF_K: f64 = 60.0;

/// Default number of candidates per retriever.
pub const DEFAULT_TOP_K: usize = 10;

const EMBED_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("provider failure while embedding {context:?}: {source}")]
    ProviderFailure {
        context: String,
        #[source]
        source: ProviderError,
    },
    #[error("dimension mismatch for {context:?}: expected {expected}, got {got}")]
    DimensionMismatch { context: String, expected: usize, got: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("precomputed embeddings: {0}")]
    Precomputed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Dense,
    Sparse,
}

/// A retrieved concept with the scores that placed it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub omop_id: OmopId,
    pub name: String,
    pub code: String,
    pub vocabulary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_type: Option<String>,
    pub matched_surface: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparse_score: Option<f64>,
    pub fused_score: f64,
    pub sources: BTreeSet<Source>,
    /// Query similarity recorded by the knowledge filter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
    /// Context directives attached by the linking rules.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub directives: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
struct ConceptInfo {
    name: String,
    code: String,
    vocabulary: String,
    semantic_type: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SurfaceEntry {
    pub omop_id: OmopId,
    pub surface: String,
}

#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    dim: usize,
    surfaces: Vec<SurfaceEntry>,
    dense: Vec<DenseVector>,
    sparse: Vec<SparseVector>,
    postings: HashMap<u32, Vec<(usize, f64)>>,
    concepts: HashMap<OmopId, ConceptInfo>,
}

/// Text embedded for one surface form: `surface | semantic_type | parent; parent`,
/// absent fields omitted.
pub fn info_text(store: &ConceptStore, concept: &Concept, surface: &str) -> String {
    let mut text = surface.to_owned();
    if let Some(st) = &concept.semantic_type {
        let _ = write!(text, " | {st}");
    }
    let parents: Vec<&str> =
        concept.parents.iter().filter_map(|p| store.get(*p)).map(|p| p.name.as_str()).collect();
    if !parents.is_empty() {
        let _ = write!(text, " | {}", parents.join("; "));
    }
    text
}

fn provider_err(context: &str) -> impl Fn(ProviderError) -> RetrievalError + '_ {
    move |source| RetrievalError::ProviderFailure { context: context.to_owned(), source }
}

impl RetrievalIndex {
    /// Embeds every surface form of the store with `provider`.
    pub fn build(
        store: &ConceptStore,
        provider: &dyn EmbeddingProvider,
    ) -> Result<Self, RetrievalError> {
        Self::build_inner(store, provider, None)
    }

    /// Like [`RetrievalIndex::build`] but takes dense vectors from a
    /// precomputed file where available; sparse postings and any missing
    /// dense vectors still come from `provider`.
    pub fn build_with_precomputed(
        store: &ConceptStore,
        provider: &dyn EmbeddingProvider,
        precomputed: &PrecomputedEmbeddings,
    ) -> Result<Self, RetrievalError> {
        Self::build_inner(store, provider, Some(precomputed))
    }

    fn build_inner(
        store: &ConceptStore,
        provider: &dyn EmbeddingProvider,
        precomputed: Option<&PrecomputedEmbeddings>,
    ) -> Result<Self, RetrievalError> {
        let mut surfaces = Vec::new();
        let mut dense_texts = Vec::new();
        let mut concepts = HashMap::new();
        for concept in store.concepts() {
            concepts.insert(
                concept.omop_id,
                ConceptInfo {
                    name: concept.name.clone(),
                    code: concept.code.clone(),
                    vocabulary: concept.vocabulary.clone(),
                    semantic_type: concept.semantic_type.clone(),
                },
            );
            for form in concept.surface_forms() {
                surfaces.push(SurfaceEntry { omop_id: concept.omop_id, surface: form.to_owned() });
                dense_texts.push(info_text(store, concept, form));
            }
        }

        let lookup: Option<HashMap<(OmopId, String), &DenseVector>> = precomputed.map(|p| {
            p.rows.iter().map(|(id, s, v)| ((*id, normalize_surface(s)), v)).collect()
        });

        // Batches run in parallel; collect keeps surface order.
        let dense_batches: Vec<Result<Vec<DenseVector>, RetrievalError>> = surfaces
            .par_chunks(EMBED_BATCH)
            .zip(dense_texts.par_chunks(EMBED_BATCH))
            .map(|(entries, texts)| {
                let mut out = Vec::with_capacity(entries.len());
                let mut missing = Vec::new();
                for (i, entry) in entries.iter().enumerate() {
                    let hit = lookup
                        .as_ref()
                        .and_then(|l| l.get(&(entry.omop_id, normalize_surface(&entry.surface))));
                    match hit {
                        Some(v) => out.push(Some((*v).clone())),
                        None => {
                            out.push(None);
                            missing.push(i);
                        }
                    }
                }
                if !missing.is_empty() {
                    let batch: Vec<&str> = missing.iter().map(|&i| texts[i].as_str()).collect();
                    let vectors = provider
                        .embed_dense_batch(&batch)
                        .map_err(provider_err(&entries[missing[0]].surface))?;
                    if vectors.len() != batch.len() {
                        return Err(RetrievalError::ProviderFailure {
                            context: entries[missing[0]].surface.clone(),
                            source: ProviderError::InvalidResponse(format!(
                                "expected {} vectors, got {}",
                                batch.len(),
                                vectors.len()
                            )),
                        });
                    }
                    for (&i, v) in missing.iter().zip(vectors) {
                        out[i] = Some(v);
                    }
                }
                Ok(out.into_iter().map(|v| v.expect("filled")).collect())
            })
            .collect();
        let sparse_batches: Vec<Result<Vec<SparseVector>, RetrievalError>> = surfaces
            .par_chunks(EMBED_BATCH)
            .map(|entries| {
                let batch: Vec<&str> = entries.iter().map(|e| e.surface.as_str()).collect();
                provider.embed_sparse_batch(&batch).map_err(provider_err(&entries[0].surface))
            })
            .collect();

        let mut dense = Vec::with_capacity(surfaces.len());
        for batch in dense_batches {
            dense.extend(batch?);
        }
        let mut sparse = Vec::with_capacity(surfaces.len());
        for batch in sparse_batches {
            sparse.extend(batch?);
        }
        if sparse.len() != surfaces.len() {
            return Err(RetrievalError::ProviderFailure {
                context: "sparse batch".into(),
                source: ProviderError::InvalidResponse("vector count mismatch".into()),
            });
        }

        let dim = dense.first().map_or(0, DenseVector::dim);
        for (entry, vector) in surfaces.iter().zip(&dense) {
            if vector.dim() != dim {
                return Err(RetrievalError::ProviderFailure {
                    context: entry.surface.clone(),
                    source: ProviderError::InvalidResponse(format!(
                        "dimension {} differs from index dimension {dim}",
                        vector.dim()
                    )),
                });
            }
            if vector.is_zero() {
                return Err(RetrievalError::ProviderFailure {
                    context: entry.surface.clone(),
                    source: ProviderError::InvalidResponse("all-zero dense vector".into()),
                });
            }
        }

        let mut postings: HashMap<u32, Vec<(usize, f64)>> = HashMap::new();
        for (i, v) in sparse.iter().enumerate() {
            for (term, weight) in v.entries() {
                postings.entry(term).or_default().push((i, weight));
            }
        }

        Ok(Self { dim, surfaces, dense, sparse, postings, concepts })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn surfaces(&self) -> &[SurfaceEntry] {
        &self.surfaces
    }

    pub fn dense_vectors(&self) -> &[DenseVector] {
        &self.dense
    }

    pub fn sparse_vectors(&self) -> &[SparseVector] {
        &self.sparse
    }

    fn candidate(&self, surface_idx: usize, source: Source, score: f64) -> Candidate {
        let entry = &self.surfaces[surface_idx];
        let info = &self.concepts[&entry.omop_id];
        Candidate {
            omop_id: entry.omop_id,
            name: info.name.clone(),
            code: info.code.clone(),
            vocabulary: info.vocabulary.clone(),
            semantic_type: info.semantic_type.clone(),
            matched_surface: entry.surface.clone(),
            dense_score: (source == Source::Dense).then_some(score),
            sparse_score: (source == Source::Sparse).then_some(score),
            fused_score: 0.0,
            sources: BTreeSet::from([source]),
            similarity: None,
            directives: Vec::new(),
        }
    }

    /// Keeps the best surface per concept and returns the top `k`,
    /// ordered by score then omop_id.
    fn top_k(&self, scored: impl Iterator<Item = (usize, f64)>, k: usize, source: Source) -> Vec<Candidate> {
        let mut best: HashMap<OmopId, (f64, usize)> = HashMap::new();
        for (idx, score) in scored {
            let id = self.surfaces[idx].omop_id;
            match best.get(&id) {
                Some(&(s, j))
                    if s > score
                        || (s == score && self.surfaces[j].surface <= self.surfaces[idx].surface) => {}
                _ => {
                    best.insert(id, (score, idx));
                }
            }
        }
        let mut ranked: Vec<(OmopId, f64, usize)> =
            best.into_iter().map(|(id, (s, idx))| (id, s, idx)).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        ranked.into_iter().map(|(_, s, idx)| self.candidate(idx, source, s)).collect()
    }

    fn embed_query_dense(
        &self,
        provider: &dyn EmbeddingProvider,
        query: &str,
    ) -> Result<DenseVector, RetrievalError> {
        let q = provider.embed_dense(query).map_err(provider_err(query))?;
        if !self.is_empty() && q.dim() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                context: query.to_owned(),
                expected: self.dim,
                got: q.dim(),
            });
        }
        Ok(q)
    }

    /// Exact cosine search over every stored dense vector.
    pub fn retrieve_dense(
        &self,
        provider: &dyn EmbeddingProvider,
        query: &str,
        k: usize,
    ) -> Result<Vec<Candidate>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        if self.is_empty() {
            return Ok(Vec::new());
        }
        let q = self.embed_query_dense(provider, query)?;
        Ok(self.dense_with_vector(&q, k))
    }

    /// Dense search with an already embedded query.
    pub fn dense_with_vector(&self, query: &DenseVector, k: usize) -> Vec<Candidate> {
        let scores = self.dense.iter().map(|v| query.cosine(v)).enumerate();
        self.top_k(scores, k, Source::Dense)
    }

    /// Sparse dot-product search. Surfaces sharing no term with the query
    /// are not candidates.
    pub fn retrieve_sparse(
        &self,
        provider: &dyn EmbeddingProvider,
        query: &str,
        k: usize,
    ) -> Result<Vec<Candidate>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        if self.is_empty() {
            return Ok(Vec::new());
        }
        let q = provider.embed_sparse(query).map_err(provider_err(query))?;
        Ok(self.sparse_with_vector(&q, k))
    }

    pub fn sparse_with_vector(&self, query: &SparseVector, k: usize) -> Vec<Candidate> {
        let mut acc: HashMap<usize, f64> = HashMap::new();
        for (term, qw) in query.entries() {
            for &(idx, w) in self.postings.get(&term).into_iter().flatten() {
                *acc.entry(idx).or_insert(0.0) += qw * w;
            }
        }
        self.top_k(acc.into_iter().filter(|(_, s)| *s > 0.0), k, Source::Sparse)
    }

    /// Union of dense and sparse top-`k`, fused with [`fuse`].
    pub fn merge_retrieve(
        &self,
        provider: &dyn EmbeddingProvider,
        query: &str,
        k: usize,
    ) -> Result<Vec<Candidate>, RetrievalError> {
        let dense = self.retrieve_dense(provider, query, k)?;
        let sparse = self.retrieve_sparse(provider, query, k)?;
        Ok(fuse(&dense, &sparse))
    }
}

/// Reciprocal-rank fusion of two rankings: each concept scores
/// `Σ 1 / (60 + rank)` over the lists it appears in (ranks start at 1).
/// Output is sorted by fused score, ties by ascending omop_id. The matched
/// surface comes from the better-ranked list, dense on ties.
pub fn fuse(dense: &[Candidate], sparse: &[Candidate]) -> Vec<Candidate> {
    let mut merged: Vec<Candidate> = Vec::with_capacity(dense.len() + sparse.len());
    let mut best_rank: HashMap<OmopId, (usize, usize)> = HashMap::new();
    for (list, source) in [(dense, Source::Dense), (sparse, Source::Sparse)] {
        for (i, c) in list.iter().enumerate() {
            let rank = i + 1;
            let contribution = 1.0 / (RRF_K + rank as f64);
            match best_rank.get(&c.omop_id).copied() {
                Some((slot, prior_rank)) => {
                    let m = &mut merged[slot];
                    m.fused_score += contribution;
                    m.sources.insert(source);
                    match source {
                        Source::Dense => m.dense_score = c.dense_score,
                        Source::Sparse => m.sparse_score = c.sparse_score,
                    }
                    if rank < prior_rank {
                        m.matched_surface = c.matched_surface.clone();
                        best_rank.insert(c.omop_id, (slot, rank));
                    }
                }
                None => {
                    let mut m = c.clone();
                    m.fused_score = contribution;
                    best_rank.insert(c.omop_id, (merged.len(), rank));
                    merged.push(m);
                }
            }
        }
    }
    merged.sort_by(|a, b| b.fused_score.total_cmp(&a.fused_score).then(a.omop_id.cmp(&b.omop_id)));
    merged
}

/// Dense vectors computed offline, one per (concept, surface).
///
/// File format: a `dim=<n>` header line, then one
/// `omop_id<TAB>surface<TAB>v1,v2,...,vn` row per vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputedEmbeddings {
    pub dim: usize,
    pub rows: Vec<(OmopId, String, DenseVector)>,
}

impl PrecomputedEmbeddings {
    pub fn parse(text: &str) -> Result<Self, RetrievalError> {
        let bad = |line: usize, msg: &str| RetrievalError::Precomputed(format!("line {line}: {msg}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad(1, "missing dim header"))?;
        let dim: usize = header
            .trim()
            .strip_prefix("dim=")
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| bad(1, "expected dim=<n>"))?;
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, '\t');
            let (Some(id), Some(surface), Some(values)) = (parts.next(), parts.next(), parts.next())
            else {
                return Err(bad(lineno, "expected three tab-separated fields"));
            };
            let id: OmopId = id.trim().parse().map_err(|_| bad(lineno, "invalid omop_id"))?;
            let values: Vec<f64> = values
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| bad(lineno, "invalid vector component"))?;
            if values.len() != dim {
                return Err(bad(lineno, &format!("expected {dim} components, got {}", values.len())));
            }
            rows.push((id, surface.to_owned(), DenseVector::new(values)));
        }
        Ok(Self { dim, rows })
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RetrievalError::Precomputed(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Dense vectors of an index, one row per surface.
    pub fn from_index(index: &RetrievalIndex) -> Self {
        Self {
            dim: index.dim,
            rows: index
                .surfaces
                .iter()
                .zip(&index.dense)
                .map(|(s, v)| (s.omop_id, s.surface.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn to_text(&self) -> Result<String, RetrievalError> {
        let mut out = format!("dim={}\n", self.dim);
        for (id, surface, v) in &self.rows {
            if surface.contains(['\t', '\n', '\r']) {
                return Err(RetrievalError::Precomputed(format!(
                    "surface {surface:?} contains a tab or newline"
                )));
            }
            let values: Vec<String> = v.values().iter().map(|x| format!("{x:?}")).collect();
            let _ = writeln!(out, "{id}\t{surface}\t{}", values.join(","));
        }
        Ok(out)
    }
}
