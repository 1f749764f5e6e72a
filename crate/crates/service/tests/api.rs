use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use cdemap_core::decomposer::ExampleBank;
use cdemap_core::filter::LinkingRules;
use cdemap_core::pipeline::{PipelineConfig, PipelineContext};
use cdemap_core::provider::{EmbeddingProvider, HashingEmbedder, HeuristicLlm};
use cdemap_core::reservoir::Reservoir;
use cdemap_core::vocab::{expand_synonyms, load_kb_dir, ExpansionConfig};
use cdemap_service::{router, ServiceConfig};
use serde_json::{json, Value};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

struct Server {
    base: String,
    _dir: tempfile::TempDir,
}

fn start() -> Server {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<h1>review</h1>").unwrap();
    let rules_path = dir.path().join("rules.json");
    std::fs::copy(fixtures().join("rules.json"), &rules_path).unwrap();

    let store = Arc::new(expand_synonyms(load_kb_dir(&fixtures().join("kb/clinical")).unwrap(), &ExpansionConfig::default()));
    let embedder: Arc<dyn EmbeddingProvider> = Arc::new(HashingEmbedder::default());
    let bank = Arc::new(ExampleBank::load(&fixtures().join("example_bank.json"), &*embedder).unwrap());
    let rules = Arc::new(LinkingRules::load(&rules_path).unwrap());
    let reservoir = Arc::new(Reservoir::open(&dir.path().join("reservoir.log"), store.clone()).unwrap());
    let ctx = PipelineContext::new(store, embedder, Arc::new(HeuristicLlm::new()), bank, rules, reservoir, PipelineConfig::default()).unwrap();
    let config = ServiceConfig { parallelism: 2, rules_path: Some(rules_path), ui_dir: Some(dir.path().to_owned()) };
    let app = router(ctx, config);

    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    listener.set_nonblocking(true).unwrap();
    std::thread::spawn(move || {
        tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap().block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).unwrap();
            axum::serve(listener, app).await.unwrap();
        })
    });
    Server { base: format!("http://{addr}"), _dir: dir }
}

impl Server {
    fn call(&self, method: &str, path: &str, body: Option<&str>) -> (u16, String) {
        let req = ureq::request(method, &format!("{}{path}", self.base)).set("content-type", "application/json");
        let result = match body {
            Some(b) => req.send_string(b),
            None => req.call(),
        };
        match result {
            Ok(r) => (r.status(), r.into_string().unwrap()),
            Err(ureq::Error::Status(code, r)) => (code, r.into_string().unwrap()),
            Err(e) => panic!("{method} {path}: {e}"),
        }
    }

    fn json(&self, method: &str, path: &str, body: Option<Value>) -> (u16, Value) {
        let body = body.map(|b| b.to_string());
        let (status, text) = self.call(method, path, body.as_deref());
        (status, serde_json::from_str(&text).unwrap_or_else(|e| panic!("{text}: {e}")))
    }

    fn wait_done(&self, job_id: &str) -> Value {
        let deadline = Instant::now() + Duration::from_secs(30);
        loop {
            let (status, job) = self.json("GET", &format!("/v1/jobs/{job_id}"), None);
            assert_eq!(status, 200);
            match job["state"].as_str().unwrap() {
                "done" | "failed" => return job,
                _ if Instant::now() > deadline => panic!("job {job_id} stuck: {job}"),
                _ => std::thread::sleep(Duration::from_millis(20)),
            }
        }
    }

    fn run_job(&self, entries: Value) -> Value {
        let (status, job) = self.json("POST", "/v1/jobs?trace=true", Some(entries));
        assert_eq!(status, 202, "{job}");
        assert_eq!(job["state"], "queued");
        self.wait_done(job["job_id"].as_str().unwrap())
    }
}

#[test]
fn health_reports_the_store() {
    let s = start();
    let (status, body) = s.json("GET", "/v1/health", None);
    assert_eq!(status, 200);
    assert_eq!(body["status"], "ok");
    assert!(body["concepts"].as_u64().unwrap() > 20);
}

#[test]
fn one_entry_job_completes_with_one_result() {
    let s = start();
    let job = s.run_job(json!([{ "name": "hr", "label": "heart rate" }]));
    assert_eq!(job["state"], "done");
    assert_eq!(job["progress"], json!({ "completed": 1, "total": 1 }));
    let results = job["results"].as_array().unwrap();
    assert_eq!(results.len(), 1);
    assert_eq!(results[0]["component_results"]["base_entity"]["omop_id"], 500);
    assert_eq!(results[0]["component_results"]["base_entity"]["status"], "exact_match");

    let path = format!("/v1/jobs/{}", job["job_id"].as_str().unwrap());
    let first = s.call("GET", &path, None);
    let second = s.call("GET", &path, None);
    assert_eq!(first, second);
}

#[test]
fn bad_payloads_and_unknown_ids() {
    let s = start();
    let (status, body) = s.json("POST", "/v1/jobs", Some(json!([{ "name": "a", "label": "" }, { "label": 3 }])));
    assert_eq!(status, 400);
    assert_eq!(body["error"]["code"], "bad_payload");
    assert!(!body["error"]["details"]["rows"].as_array().unwrap().is_empty());

    let (status, body) = s.json("POST", "/v1/jobs", Some(json!({ "dictionary": [] })));
    assert_eq!((status, body["error"]["code"].as_str()), (400, Some("bad_payload")));

    let (status, body) = s.json("GET", "/v1/jobs/job-999999", None);
    assert_eq!((status, body["error"]["code"].as_str()), (404, Some("not_found")));

    let (status, body) = s.json("POST", "/v1/review/77/decision", Some(json!({ "decision": "approve" })));
    assert_eq!((status, body["error"]["code"].as_str()), (404, Some("not_found")));

    let (status, body) = s.json("GET", "/v1/nope", None);
    assert_eq!((status, body["error"]["code"].as_str()), (404, Some("not_found")));
}

#[test]
fn empty_queue_gives_an_empty_page() {
    let s = start();
    let (status, body) = s.json("GET", "/v1/review/pending?page=0", None);
    assert_eq!(status, 200);
    assert_eq!(body["total"], 0);
    assert_eq!(body["entries"], json!([]));
}

#[test]
fn approval_is_served_to_the_next_job() {
    let s = start();
    let entry = json!([{ "name": "hist", "label": "history of heart attack" }]);
    let first = s.run_job(entry.clone());
    assert_eq!(first["state"], "done");

    let (_, page) = s.json("GET", "/v1/review/pending?page=0", None);
    let pending = page["entries"].as_array().unwrap();
    assert!(!pending.is_empty(), "nothing queued: {first}");
    let label = pending[0]["label"].as_str().unwrap().to_owned();
    let id = pending[0]["review_id"].as_u64().unwrap();

    let (status, decided) = s.json("POST", &format!("/v1/review/{id}/decision"), Some(json!({ "decision": "approve", "reviewer": "dr. a" })));
    assert_eq!(status, 200, "{decided}");
    assert_eq!(decided["review_status"], "approved");
    assert_eq!(decided["reviewer"], "dr. a");

    let (status, again) = s.json("POST", &format!("/v1/review/{id}/decision"), Some(json!({ "decision": "reject" })));
    assert_eq!(status, 409);
    assert_eq!(again["error"]["code"], "not_pending");

    let second = s.run_job(entry);
    let components = second["results"][0]["component_results"].as_object().unwrap();
    let hit = components.values().find(|c| c["text"].as_str().unwrap().eq_ignore_ascii_case(&label)).unwrap();
    assert_eq!(hit["status"], "reservoir_hit", "{second}");
}

#[test]
fn search_returns_fused_candidates() {
    let s = start();
    let (status, body) = s.json("GET", "/v1/search?q=heart%20attack&k=3", None);
    assert_eq!(status, 200);
    let candidates = body["candidates"].as_array().unwrap();
    assert_eq!(candidates[0]["omop_id"], 100);
    assert!(candidates.len() <= 6);
    assert!(candidates[0]["fused_score"].as_f64().unwrap() > 0.0);

    let (status, body) = s.json("GET", "/v1/search?q=x&k=0", None);
    assert_eq!((status, body["error"]["code"].as_str()), (400, Some("bad_request")));
}

#[test]
fn rules_reload_and_ui_assets() {
    let s = start();
    let (status, body) = s.json("POST", "/v1/rules/reload", None);
    assert_eq!(status, 200, "{body}");
    assert_eq!(body["reloaded"], true);

    let (status, html) = s.call("GET", "/ui/", None);
    assert_eq!(status, 200);
    assert!(html.contains("review"));
}
