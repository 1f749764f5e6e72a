//! Embedding and LLM provider abstractions.
//!
//! Everything model-backed goes through [`EmbeddingProvider`] or
//! [`LlmProvider`]. The crate ships deterministic offline implementations
//! ([`HashingEmbedder`], [`HeuristicLlm`], [`ScriptedLlm`]) plus HTTP clients
//! for a remote inference service ([`wire`]).

mod hashing;
mod mock;
mod scripted;
pub mod wire;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use hashing::HashingEmbedder;
pub use mock::HeuristicLlm;
pub use scripted::ScriptedLlm;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProviderError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("invalid provider response: {0}")]
    InvalidResponse(String),
    #[error("no scripted completion for fingerprint {0}")]
    Unscripted(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    pub fn cosine(&self, other: &DenseVector) -> f64 {
        crate::text::cosine(&self.0, &other.0)
    }
}

/// Term-id to weight map. Only strictly positive weights are kept.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    entries: BTreeMap<u32, f64>,
}

impl SparseVector {
    pub fn from_entries(entries: impl IntoIterator<Item = (u32, f64)>) -> Self {
        let mut map = BTreeMap::new();
        for (term, weight) in entries {
            if weight > 0.0 {
                *map.entry(term).or_insert(0.0) += weight;
            }
        }
        Self { entries: map }
    }

    pub fn entries(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.entries.iter().map(|(t, w)| (*t, *w))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (small, large) = if self.len() <= other.len() { (self, other) } else { (other, self) };
        small
            .entries
            .iter()
            .filter_map(|(t, w)| large.entries.get(t).map(|v| w * v))
            .sum()
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;

    fn embed_dense(&self, text: &str) -> Result<DenseVector, ProviderError>;

    fn embed_sparse(&self, text: &str) -> Result<SparseVector, ProviderError>;

    fn embed_dense_batch(&self, texts: &[&str]) -> Result<Vec<DenseVector>, ProviderError> {
        texts.iter().map(|t| self.embed_dense(t)).collect()
    }

    fn embed_sparse_batch(&self, texts: &[&str]) -> Result<Vec<SparseVector>, ProviderError> {
        texts.iter().map(|t| self.embed_sparse(t)).collect()
    }
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for Arc<P> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn embed_dense(&self, text: &str) -> Result<DenseVector, ProviderError> {
        (**self).embed_dense(text)
    }
    fn embed_sparse(&self, text: &str) -> Result<SparseVector, ProviderError> {
        (**self).embed_sparse(text)
    }
    fn embed_dense_batch(&self, texts: &[&str]) -> Result<Vec<DenseVector>, ProviderError> {
        (**self).embed_dense_batch(texts)
    }
    fn embed_sparse_batch(&self, texts: &[&str]) -> Result<Vec<SparseVector>, ProviderError> {
        (**self).embed_sparse_batch(texts)
    }
}

/// What a completion is for. Remote providers ignore it; offline providers
/// use it to pick a behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Decompose,
    Rerank,
    Judge,
}

#[derive(Debug, Clone, Copy)]
pub struct CompletionRequest<'a> {
    pub task: Task,
    pub prompt: &'a str,
    pub temperature: f32,
    pub seed: Option<u64>,
}

impl<'a> CompletionRequest<'a> {
    pub fn new(task: Task, prompt: &'a str) -> Self {
        Self { task, prompt, temperature: 0.0, seed: None }
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(self.prompt, self.seed)
    }
}

pub trait LlmProvider: Send + Sync {
    fn name(&self) -> &str;

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ProviderError>;
}

impl<P: LlmProvider + ?Sized> LlmProvider for Arc<P> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ProviderError> {
        (**self).complete(request)
    }
}

impl<P: LlmProvider + ?Sized> LlmProvider for &P {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ProviderError> {
        (**self).complete(request)
    }
}

/// Stable hash of a prompt and its seed; keys the scripted fixture files.
pub fn fingerprint(prompt: &str, seed: Option<u64>) -> String {
    let mut hasher = Sha256::new();
    hasher.update(prompt.as_bytes());
    hasher.update([0x1f]);
    match seed {
        Some(s) => hasher.update(s.to_string().as_bytes()),
        None => hasher.update(b"none"),
    }
    hex::encode(&hasher.finalize()[..16])
}

/// Closure-backed provider, handy for tests and fault injection.
pub struct FnLlm<F> {
    f: F,
}

impl<F> FnLlm<F>
where
    F: Fn(&CompletionRequest<'_>) -> Result<String, ProviderError> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        Self { f }
    }
}

impl<F> LlmProvider for FnLlm<F>
where
    F: Fn(&CompletionRequest<'_>) -> Result<String, ProviderError> + Send + Sync,
{
    fn name(&self) -> &str {
        "fn"
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ProviderError> {
        (self.f)(request)
    }
}

/// Counts calls per [`Task`] while delegating to an inner provider.
pub struct CountingLlm<P> {
    inner: P,
    decompose: AtomicUsize,
    rerank: AtomicUsize,
    judge: AtomicUsize,
}

impl<P: LlmProvider> CountingLlm<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            decompose: AtomicUsize::new(0),
            rerank: AtomicUsize::new(0),
            judge: AtomicUsize::new(0),
        }
    }

    fn counter(&self, task: Task) -> &AtomicUsize {
        match task {
            Task::Decompose => &self.decompose,
            Task::Rerank => &self.rerank,
            Task::Judge => &self.judge,
        }
    }

    pub fn calls(&self, task: Task) -> usize {
        self.counter(task).load(Ordering::SeqCst)
    }

    pub fn total(&self) -> usize {
        [Task::Decompose, Task::Rerank, Task::Judge].iter().map(|t| self.calls(*t)).sum()
    }

    pub fn reset(&self) {
        for t in [Task::Decompose, Task::Rerank, Task::Judge] {
            self.counter(t).store(0, Ordering::SeqCst);
        }
    }
}

impl<P: LlmProvider> LlmProvider for CountingLlm<P> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ProviderError> {
        self.counter(request.task).fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request)
    }
}
