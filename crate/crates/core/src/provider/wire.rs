//! HTTP clients for a remote inference service.
//!
//! Protocol (all bodies JSON, POST):
//!
//! * dense embeddings: `{"texts": [..]}` → `{"vectors": [[f64, ..], ..]}`
//! * sparse embeddings: `{"texts": [..]}` →
//!   `{"vectors": [{"entries": [{"term": u32, "weight": f64}, ..]}, ..]}`
//! * completions: `{"task", "prompt", "temperature", "seed"}` → `{"text": ".."}`

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    CompletionRequest, DenseVector, EmbeddingProvider, LlmProvider, ProviderError, SparseVector,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingEndpoints {
    pub dense_url: String,
    pub sparse_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmEndpoint {
    pub url: String,
}

/// `--provider-config` file contents (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireConfig {
    pub embedding: EmbeddingEndpoints,
    pub llm: LlmEndpoint,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    120
}

impl WireConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text)
    }

    fn agent(&self) -> ureq::Agent {
        ureq::AgentBuilder::new().timeout(Duration::from_secs(self.timeout_secs)).build()
    }
}

fn post(agent: &ureq::Agent, url: &str, body: serde_json::Value) -> Result<ureq::Response, ProviderError> {
    agent.post(url).send_json(body).map_err(|e| ProviderError::Transport(format!("{url}: {e}")))
}

pub struct WireEmbeddingProvider {
    endpoints: EmbeddingEndpoints,
    agent: ureq::Agent,
}

impl WireEmbeddingProvider {
    pub fn new(config: &WireConfig) -> Self {
        Self { endpoints: config.embedding.clone(), agent: config.agent() }
    }
}

#[derive(Deserialize)]
struct DenseResponse {
    vectors: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct SparseEntry {
    term: u32,
    weight: f64,
}

#[derive(Deserialize)]
struct SparseItem {
    entries: Vec<SparseEntry>,
}

#[derive(Deserialize)]
struct SparseResponse {
    vectors: Vec<SparseItem>,
}

fn check_count(expected: usize, got: usize) -> Result<(), ProviderError> {
    if expected == got {
        Ok(())
    } else {
        Err(ProviderError::InvalidResponse(format!("expected {expected} vectors, got {got}")))
    }
}

impl EmbeddingProvider for WireEmbeddingProvider {
    fn name(&self) -> &str {
        "wire"
    }

    fn embed_dense(&self, text: &str) -> Result<DenseVector, ProviderError> {
        Ok(self.embed_dense_batch(&[text])?.remove(0))
    }

    fn embed_sparse(&self, text: &str) -> Result<SparseVector, ProviderError> {
        Ok(self.embed_sparse_batch(&[text])?.remove(0))
    }

    fn embed_dense_batch(&self, texts: &[&str]) -> Result<Vec<DenseVector>, ProviderError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let response: DenseResponse =
            post(&self.agent, &self.endpoints.dense_url, json!({ "texts": texts }))?
                .into_json()
                .map_err(|e| ProviderError::InvalidResponse(e.to_string()))?;
        check_count(texts.len(), response.vectors.len())?;
        Ok(response.vectors.into_iter().map(DenseVector::new).collect())
    }

    fn embed_sparse_batch(&self, texts: &[&str]) -> Result<Vec<SparseVector>, ProviderError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let response: SparseResponse =
            post(&self.agent, &self.endpoints.sparse_url, json!({ "texts": texts }))?
                .into_json()
                .map_err(|e| ProviderError::InvalidResponse(e.to_string()))?;
        check_count(texts.len(), response.vectors.len())?;
        Ok(response
            .vectors
            .into_iter()
            .map(|v| SparseVector::from_entries(v.entries.into_iter().map(|e| (e.term, e.weight))))
            .collect())
    }
}

pub struct WireLlmProvider {
    url: String,
    agent: ureq::Agent,
}

impl WireLlmProvider {
    pub fn new(config: &WireConfig) -> Self {
        Self { url: config.llm.url.clone(), agent: config.agent() }
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    text: String,
}

impl LlmProvider for WireLlmProvider {
    fn name(&self) -> &str {
        "wire"
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ProviderError> {
        let body = json!({
            "task": request.task,
            "prompt": request.prompt,
            "temperature": request.temperature,
            "seed": request.seed,
        });
        let response: CompletionResponse = post(&self.agent, &self.url, body)?
            .into_json()
            .map_err(|e| ProviderError::InvalidResponse(e.to_string()))?;
        Ok(response.text)
    }
}

#[cfg(test)]
mod tests {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    use super::*;
    use crate::provider::Task;

    /// Serves one canned JSON body per connection and returns the request bodies.
    fn serve(bodies: Vec<&'static str>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for body in bodies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                seen.push(String::from_utf8(buf).unwrap());
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    body.len(),
                    body
                )
                .unwrap();
            }
            seen
        });
        (url, handle)
    }

    fn config(url: &str) -> WireConfig {
        WireConfig::from_toml(&format!(
            "timeout_secs = 5\n[embedding]\ndense_url = \"{url}\"\nsparse_url = \"{url}\"\n[llm]\nurl = \"{url}\"\n"
        ))
        .unwrap()
    }

    #[test]
    fn dense_sparse_and_completion_round_trip() {
        let (url, handle) = serve(vec![
            r#"{"vectors":[[0.6,0.8],[1.0,0.0]]}"#,
            r#"{"vectors":[{"entries":[{"term":7,"weight":2.0},{"term":9,"weight":0.0}]}]}"#,
            r#"{"text":"1:10"}"#,
        ]);
        let cfg = config(&url);
        let embed = WireEmbeddingProvider::new(&cfg);
        let dense = embed.embed_dense_batch(&["a", "b"]).unwrap();
        assert_eq!(dense[0].values(), &[0.6, 0.8]);
        let sparse = embed.embed_sparse("a").unwrap();
        assert_eq!(sparse.entries().collect::<Vec<_>>(), vec![(7, 2.0)]);
        let llm = WireLlmProvider::new(&cfg);
        let out = llm.complete(&CompletionRequest::new(Task::Rerank, "p").with_seed(Some(2))).unwrap();
        assert_eq!(out, "1:10");
        let seen = handle.join().unwrap();
        assert_eq!(seen[0], r#"{"texts":["a","b"]}"#);
        let completion: serde_json::Value = serde_json::from_str(&seen[2]).unwrap();
        assert_eq!(completion["seed"], 2);
        assert_eq!(completion["task"], "rerank");
    }

    #[test]
    fn vector_count_mismatch_is_invalid() {
        let (url, handle) = serve(vec![r#"{"vectors":[]}"#]);
        let embed = WireEmbeddingProvider::new(&config(&url));
        assert!(matches!(embed.embed_dense("a"), Err(ProviderError::InvalidResponse(_))));
        handle.join().unwrap();
    }

    #[test]
    fn unreachable_endpoint_is_transport_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        drop(listener);
        let llm = WireLlmProvider::new(&config(&url));
        assert!(matches!(
            llm.complete(&CompletionRequest::new(Task::Judge, "p")),
            Err(ProviderError::Transport(_))
        ));
    }

    #[test]
    fn config_parsing_errors() {
        assert!(WireConfig::from_toml("[llm]\nurl = \"x\"\n").is_err());
        assert!(WireConfig::from_toml("[embedding]\nbogus = \"x\"\n").is_err());
    }
}
