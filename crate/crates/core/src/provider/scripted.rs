use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use super::{fingerprint, CompletionRequest, LlmProvider, ProviderError};

/// Replays completions keyed by [`fingerprint`] of prompt and seed.
///
/// The fixture file is a JSON object mapping fingerprints to completion
/// text. Prompts without an entry go to the fallback provider when one is
/// set, and fail with [`ProviderError::Unscripted`] otherwise.
#[derive(Clone, Default)]
pub struct ScriptedLlm {
    completions: BTreeMap<String, String>,
    fallback: Option<Arc<dyn LlmProvider>>,
}

impl ScriptedLlm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fallback(mut self, fallback: Arc<dyn LlmProvider>) -> Self {
        self.fallback = Some(fallback);
        self
    }

    pub fn insert(&mut self, prompt: &str, seed: Option<u64>, completion: impl Into<String>) {
        self.completions.insert(fingerprint(prompt, seed), completion.into());
    }

    pub fn insert_fingerprint(&mut self, fingerprint: String, completion: impl Into<String>) {
        self.completions.insert(fingerprint, completion.into());
    }

    pub fn len(&self) -> usize {
        self.completions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.completions.is_empty()
    }

    pub fn completions(&self) -> &BTreeMap<String, String> {
        &self.completions
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        Ok(Self { completions: serde_json::from_str(text)?, fallback: None })
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(&self.completions).expect("string map");
        out.push('\n');
        out
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

impl LlmProvider for ScriptedLlm {
    fn name(&self) -> &str {
        "scripted"
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ProviderError> {
        let key = request.fingerprint();
        if let Some(text) = self.completions.get(&key) {
            return Ok(text.clone());
        }
        match &self.fallback {
            Some(fallback) => fallback.complete(request),
            None => Err(ProviderError::Unscripted(key)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{FnLlm, Task};

    #[test]
    fn replays_by_prompt_and_seed() {
        let mut s = ScriptedLlm::new();
        s.insert("rank these", Some(0), "1:10");
        let req = CompletionRequest::new(Task::Rerank, "rank these").with_seed(Some(0));
        assert_eq!(s.complete(&req).unwrap(), "1:10");
        let other_seed = req.with_seed(Some(1));
        assert!(matches!(s.complete(&other_seed), Err(ProviderError::Unscripted(_))));
    }

    #[test]
    fn falls_back_when_unscripted() {
        let s = ScriptedLlm::new().with_fallback(Arc::new(FnLlm::new(|_| Ok("fallback".into()))));
        let req = CompletionRequest::new(Task::Judge, "x");
        assert_eq!(s.complete(&req).unwrap(), "fallback");
    }

    #[test]
    fn json_round_trip() {
        let mut s = ScriptedLlm::new();
        s.insert("a", None, "one");
        s.insert("b", Some(3), "two");
        let back = ScriptedLlm::from_json(&s.to_json()).unwrap();
        assert_eq!(back.completions(), s.completions());
    }
}
