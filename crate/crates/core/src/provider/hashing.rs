use std::hash::Hasher;

use fnv::FnvHasher;

use super::{DenseVector, EmbeddingProvider, ProviderError, SparseVector};
use crate::text::{normalize_surface, tokens};

/// Offline embedder used by tests, fixtures and the `mock` provider.
///
/// Dense vectors are L2-normalized counts of character 3-grams (of the
/// normalized text padded with one space on each side) hashed into
/// `dim` buckets. Sparse vectors are case-folded token counts keyed by a
/// 31-bit token hash. All components are non-negative, so cosine scores
/// fall in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "dimension must be positive");
        Self { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn trigrams(text: &str) -> Vec<String> {
        let padded: Vec<char> = format!(" {} ", normalize_surface(text)).chars().collect();
        padded.windows(3).map(|w| w.iter().collect()).collect()
    }

    pub fn term_id(token: &str) -> u32 {
        (hash(token) & 0x7fff_ffff) as u32
    }

    /// Cosine of the dense embeddings of two strings.
    pub fn similarity(&self, a: &str, b: &str) -> f64 {
        self.dense(a).cosine(&self.dense(b))
    }

    fn dense(&self, text: &str) -> DenseVector {
        let mut counts = vec![0.0f64; self.dim];
        for gram in Self::trigrams(text) {
            counts[(hash(&gram) % self.dim as u64) as usize] += 1.0;
        }
        let norm = counts.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            counts.iter_mut().for_each(|v| *v /= norm);
        }
        DenseVector::new(counts)
    }
}

fn hash(s: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(s.as_bytes());
    h.finish()
}

impl EmbeddingProvider for HashingEmbedder {
    fn name(&self) -> &str {
        "hashing"
    }

    fn embed_dense(&self, text: &str) -> Result<DenseVector, ProviderError> {
        Ok(self.dense(text))
    }

    fn embed_sparse(&self, text: &str) -> Result<SparseVector, ProviderError> {
        Ok(SparseVector::from_entries(tokens(text).iter().map(|t| (Self::term_id(t), 1.0))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_is_unit_length_and_deterministic() {
        let e = HashingEmbedder::default();
        let v = e.embed_dense("Heart attack").unwrap();
        assert_eq!(v.dim(), 256);
        let norm: f64 = v.values().iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(v, e.embed_dense("heart   ATTACK").unwrap());
    }

    #[test]
    fn trigrams_are_padded() {
        assert_eq!(HashingEmbedder::trigrams("man"), vec![" ma", "man", "an "]);
        assert_eq!(HashingEmbedder::trigrams("a"), vec![" a "]);
    }

    #[test]
    fn sparse_counts_tokens() {
        let e = HashingEmbedder::default();
        let v = e.embed_sparse("heart heart attack").unwrap();
        let heart = HashingEmbedder::term_id("heart");
        assert_eq!(v.entries().find(|(t, _)| *t == heart).unwrap().1, 2.0);
        assert_eq!(v.len(), 2);
    }
}
