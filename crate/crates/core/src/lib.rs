//! Linking of clinical data-dictionary variables to controlled-vocabulary
//! concepts.
//!
//! Entries are decomposed into sub-queries by an LLM, candidates come from
//! hybrid dense/sparse retrieval over a concept store, get filtered by
//! vocabulary routing rules and an embedding-similarity threshold, and are
//! reranked with self-consistency voting. Validated mappings are cached in a
//! reservoir that only serves what a reviewer approved.

pub mod decomposer;
pub mod eval;
pub mod filter;
pub mod pipeline;
pub mod provider;
pub mod reranker;
pub mod reservoir;
pub mod retrieval;
pub mod text;
pub mod vocab;
