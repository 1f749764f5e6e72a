//! Surface-form normalization shared by the vocabulary store, the reservoir
//! and the evaluation code.
//!
//! Two strings denote the same surface form when they are equal after NFC
//! normalization, case folding and collapsing inner whitespace runs.

use unicode_normalization::UnicodeNormalization;

/// Canonical key for a surface form.
pub fn normalize_surface(text: &str) -> String {
    let folded: String = text.nfc().flat_map(char::to_lowercase).collect();
    collapse_whitespace(&folded)
}

/// Trims and collapses runs of whitespace into a single space, keeping case.
pub fn collapse_whitespace(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for word in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Case-folded alphanumeric tokens.
pub fn tokens(text: &str) -> Vec<String> {
    normalize_surface(text)
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Cosine similarity of two equal-length vectors. Zero vectors score 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}
