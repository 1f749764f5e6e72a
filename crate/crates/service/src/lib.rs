//! HTTP front end: mapping jobs, retrieval debugging and the review queue.
//!
//! Every endpoint lives under `/v1` and speaks JSON. Errors come back as
//! `{"error": {"code", "message", "details"?}}` with a stable `code`.
//! Static review UI assets, when configured, are served under `/ui`.

pub mod error;
pub mod jobs;

use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cdemap_core::decomposer::{parse_dictionary_json, DataDictionaryEntry};
use cdemap_core::filter::LinkingRules;
use cdemap_core::pipeline::PipelineContext;
use cdemap_core::reservoir::ReviewDecision;
use serde::Deserialize;
use serde_json::{json, Value};
use tower_http::services::ServeDir;

pub use error::ApiError;
pub use jobs::{JobQueue, JobState, MappingJob};

const DEFAULT_PAGE_SIZE: usize = 50;
const REVIEWER_HEADER: &str = "x-reviewer";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Worker threads per mapping job.
    pub parallelism: usize,
    /// Source for `POST /v1/rules/reload`.
    pub rules_path: Option<PathBuf>,
    /// Directory served under `/ui`.
    pub ui_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { parallelism: 4, rules_path: None, ui_dir: None }
    }
}

struct AppState {
    ctx: Arc<RwLock<Arc<PipelineContext>>>,
    jobs: JobQueue,
    config: ServiceConfig,
}

impl AppState {
    fn ctx(&self) -> Arc<PipelineContext> {
        self.ctx.read().unwrap().clone()
    }
}

type Shared = State<Arc<AppState>>;

/// Builds the router and starts the job worker.
pub fn router(ctx: PipelineContext, config: ServiceConfig) -> Router {
    let ctx = Arc::new(RwLock::new(Arc::new(ctx)));
    let jobs = JobQueue::start(ctx.clone(), config.parallelism);
    let ui_dir = config.ui_dir.clone();
    let state = Arc::new(AppState { ctx, jobs, config });
    let api = Router::new()
        .route("/health", get(health))
        .route("/jobs", post(submit_job))
        .route("/jobs/{id}", get(get_job))
        .route("/review/pending", get(list_pending))
        .route("/review/{id}/decision", post(decide))
        .route("/search", get(search))
        .route("/rules/reload", post(reload_rules))
        .fallback(|| async { ApiError::not_found("endpoint") });
    let mut app = Router::new().nest("/v1", api).with_state(state);
    if let Some(dir) = ui_dir {
        app = app.nest_service("/ui", ServeDir::new(dir).append_index_html_on_directories(true));
    }
    app
}

/// Serves `app` on `listener` until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn health(State(state): Shared) -> Json<Value> {
    let ctx = state.ctx();
    Json(json!({
        "status": "ok",
        "concepts": ctx.store.len(),
        "surfaces": ctx.index.len(),
        "pending_reviews": ctx.reservoir.pending_count(),
        "jobs": state.jobs.len(),
    }))
}

#[derive(Debug, Deserialize)]
struct JobParams {
    #[serde(default)]
    trace: bool,
}

/// Accepts a bare JSON dictionary array or `{"entries": [...]}`.
fn parse_payload(body: &str) -> Result<Vec<DataDictionaryEntry>, ApiError> {
    let value: Value = serde_json::from_str(body).map_err(|e| {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_payload", format!("body is not JSON: {e}"))
    })?;
    let entries = match value {
        Value::Array(_) => value,
        Value::Object(mut map) if map.contains_key("entries") => map.remove("entries").unwrap(),
        _ => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "bad_payload",
                "expected a dictionary array or an object with \"entries\"",
            ))
        }
    };
    Ok(parse_dictionary_json(&entries.to_string())?)
}

async fn submit_job(State(state): Shared, Query(params): Query<JobParams>, body: String) -> Result<Response, ApiError> {
    let entries = parse_payload(&body)?;
    let job = state.jobs.submit(entries, params.trace);
    tracing::info!(job_id = %job.job_id, entries = job.progress.total, "job submitted");
    Ok((StatusCode::ACCEPTED, Json(job)).into_response())
}

async fn get_job(State(state): Shared, Path(id): Path<String>) -> Result<Json<MappingJob>, ApiError> {
    state.jobs.get(&id).map(Json).ok_or_else(|| ApiError::not_found(format!("job {id}")))
}

#[derive(Debug, Deserialize)]
struct PageParams {
    #[serde(default)]
    page: usize,
    page_size: Option<usize>,
}

async fn list_pending(State(state): Shared, Query(params): Query<PageParams>) -> Result<Json<Value>, ApiError> {
    let page_size = params.page_size.unwrap_or(DEFAULT_PAGE_SIZE);
    if page_size == 0 {
        return Err(ApiError::bad_request("page_size must be at least 1"));
    }
    let reservoir = state.ctx().reservoir.clone();
    Ok(Json(json!({
        "page": params.page,
        "page_size": page_size,
        "total": reservoir.pending_count(),
        "entries": reservoir.list_pending(params.page, page_size),
    })))
}

#[derive(Debug, Deserialize)]
struct DecisionBody {
    #[serde(flatten)]
    decision: ReviewDecision,
    reviewer: Option<String>,
}

async fn decide(
    State(state): Shared,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: String,
) -> Result<Response, ApiError> {
    let review_id: u64 = id.parse().map_err(|_| ApiError::bad_request(format!("invalid review id {id:?}")))?;
    let body: DecisionBody = serde_json::from_str(&body).map_err(|e| {
        ApiError::bad_request(format!("expected {{\"decision\": \"approve|reject|modify\", ...}}: {e}"))
    })?;
    let reviewer = body
        .reviewer
        .or_else(|| headers.get(REVIEWER_HEADER).and_then(|v| v.to_str().ok()).map(str::to_owned));
    let reservoir = state.ctx().reservoir.clone();
    let entry = tokio::task::spawn_blocking(move || {
        reservoir.apply_decision(review_id, body.decision, reviewer.as_deref())
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(entry).into_response())
}

#[derive(Debug, Deserialize)]
struct SearchParams {
    q: Option<String>,
    k: Option<usize>,
}

async fn search(State(state): Shared, Query(params): Query<SearchParams>) -> Result<Json<Value>, ApiError> {
    let q = params.q.filter(|q| !q.trim().is_empty()).ok_or_else(|| ApiError::bad_request("missing query parameter q"))?;
    let k = params.k.unwrap_or(cdemap_core::retrieval::DEFAULT_TOP_K);
    let ctx = state.ctx();
    let query = q.clone();
    let candidates = tokio::task::spawn_blocking(move || ctx.index.merge_retrieve(&*ctx.embedder, &query, k))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(|e| match e {
            cdemap_core::retrieval::RetrievalError::InvalidK => ApiError::bad_request(e.to_string()),
            other => ApiError::new(StatusCode::BAD_GATEWAY, "provider", other.to_string()),
        })?;
    Ok(Json(json!({ "query": q, "k": k, "candidates": candidates })))
}

async fn reload_rules(State(state): Shared) -> Result<Json<Value>, ApiError> {
    let path = state
        .config
        .rules_path
        .clone()
        .ok_or_else(|| ApiError::bad_request("the service was started without a rules file"))?;
    let rules = LinkingRules::load(&path)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_rules", e.to_string()))?;
    let mut guard = state.ctx.write().unwrap();
    rules
        .validate(&guard.store)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_rules", e.to_string()))?;
    let summary = json!({ "reloaded": true, "routes": rules.routes.len(), "context_rules": rules.context_rules.len() });
    let mut next = PipelineContext::clone(&guard);
    next.rules = Arc::new(rules);
    *guard = Arc::new(next);
    tracing::info!(path = %path.display(), "linking rules reloaded");
    Ok(Json(summary))
}
