//! HTTP JSON API: guardrail, retrieval and cited generation behind `/ask`,
//! index updates behind `/ingest`, and `/health`.

pub mod config;
pub mod limiter;
pub mod session;

use std::path::Path;
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Request, State};
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tutor_core::answer::{
    assemble_prompt, validate_citations, AnswerError, ChatClient, ContextChunk, GenerationConfig,
};
use tutor_core::chunker::chunk_document;
use tutor_core::embed::{build_embedder, Embedder};
use tutor_core::guardrail::{Guardrail, GuardrailConfig};
use tutor_core::index::{IndexEntry, IndexError, VectorIndex};
use tutor_core::ingest::Document;

pub use config::{RateLimit, ServiceConfig};
use limiter::{Clock, RateLimiter, SystemClock};
use session::SessionStore;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid service config: {0}")]
    Config(String),
    #[error("index: {0}")]
    Index(#[from] IndexError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Deserialize)]
pub struct AskRequest {
    pub question: String,
    #[serde(default)]
    pub session_id: Option<String>,
    #[serde(default)]
    pub topic_filter: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CitationView {
    pub number: usize,
    pub source_ref: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub chunk_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AskResponse {
    pub answer: String,
    pub rejected: bool,
    pub citations: Vec<CitationView>,
    pub session_id: String,
    pub retrieved: Vec<Retrieved>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestResponse {
    pub chunks_added: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub index_size: usize,
    pub model_id: String,
    pub uptime_s: f64,
}

/// Error response: `{"error": "..."}` with an optional `Retry-After`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    retry_after: Option<u64>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            retry_after: None,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut resp = (self.status, Json(serde_json::json!({"error": self.message}))).into_response();
        if let Some(secs) = self.retry_after {
            resp.headers_mut()
                .insert("retry-after", HeaderValue::from(secs));
        }
        resp
    }
}

/// Marks a response as a guardrail rejection for the request log.
#[derive(Debug, Clone, Copy)]
struct Rejected(bool);

pub struct AppState {
    cfg: ServiceConfig,
    guardrail: Guardrail,
    embedder: Arc<dyn Embedder>,
    chat: ChatClient,
    index: RwLock<Arc<VectorIndex>>,
    /// Serializes index writers; readers only take the `RwLock` briefly.
    ingest_lock: tokio::sync::Mutex<()>,
    sessions: SessionStore,
    limiter: RateLimiter,
    clock: Arc<dyn Clock>,
    started: Instant,
}

impl AppState {
    pub fn new(
        cfg: ServiceConfig,
        guardrail: GuardrailConfig,
        generation: GenerationConfig,
        index: VectorIndex,
    ) -> Result<Self, ServiceError> {
        cfg.validate()?;
        let embedder = build_embedder(&cfg.embedder).map_err(|e| ServiceError::Config(e.to_string()))?;
        if !index.is_empty() && (index.dim() != embedder.dim() || index.model_id() != embedder.model_id()) {
            return Err(ServiceError::Config(format!(
                "index holds {}-dim vectors from {}, embedder produces {}-dim vectors from {}",
                index.dim(),
                index.model_id(),
                embedder.dim(),
                embedder.model_id()
            )));
        }
        let guardrail = Guardrail::new(guardrail).map_err(|e| ServiceError::Config(e.to_string()))?;
        let chat = ChatClient::new(generation).map_err(|e| ServiceError::Config(e.to_string()))?;
        Ok(Self {
            guardrail,
            embedder,
            chat,
            index: RwLock::new(Arc::new(index)),
            ingest_lock: tokio::sync::Mutex::new(()),
            sessions: SessionStore::new(Duration::from_secs(cfg.session_ttl_secs), cfg.session_max_turns),
            limiter: RateLimiter::new(cfg.rate_limit),
            clock: Arc::new(SystemClock::default()),
            started: Instant::now(),
            cfg,
        })
    }

    /// Loads the guardrail, generation config and index named in `cfg`.
    /// A missing index file starts an empty index.
    pub fn from_config(cfg: ServiceConfig) -> Result<Self, ServiceError> {
        let guardrail = if cfg.guardrail_config_path.as_os_str().is_empty() {
            GuardrailConfig::default()
        } else {
            GuardrailConfig::load(&cfg.guardrail_config_path).map_err(|e| ServiceError::Config(e.to_string()))?
        };
        let generation = if cfg.generation_config_path.as_os_str().is_empty() {
            GenerationConfig::default()
        } else {
            GenerationConfig::load(&cfg.generation_config_path).map_err(|e| ServiceError::Config(e.to_string()))?
        };
        let index = if !cfg.index_path.as_os_str().is_empty() && cfg.index_path.exists() {
            let idx = VectorIndex::load(&std::fs::read(&cfg.index_path)?)?;
            tracing::info!(path = %cfg.index_path.display(), entries = idx.len(), "index loaded");
            idx
        } else {
            tracing::warn!(path = %cfg.index_path.display(), "no index file, starting empty");
            VectorIndex::empty(cfg.embedder.dim, &cfg.embedder.model_id, cfg.ann)
        };
        Self::new(cfg, guardrail, generation, index)
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn index(&self) -> Arc<VectorIndex> {
        self.index.read().expect("index lock").clone()
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    fn client_key(&self, headers: &HeaderMap) -> String {
        headers
            .get(self.cfg.client_key_header.as_str())
            .and_then(|v| v.to_str().ok())
            .unwrap_or("anonymous")
            .to_owned()
    }

    fn admit(&self, headers: &HeaderMap) -> Result<(), ApiError> {
        self.limiter
            .check(&self.client_key(headers), self.clock.now())
            .map_err(|wait| ApiError {
                retry_after: Some(wait.as_secs_f64().ceil().max(1.0) as u64),
                ..ApiError::new(StatusCode::TOO_MANY_REQUESTS, "rate limit exceeded")
            })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/ask", post(ask))
        .route("/ingest", post(ingest))
        .route("/health", get(health))
        .layer(middleware::from_fn(log_request))
        .with_state(state)
}

async fn log_request(req: Request, next: Next) -> Response {
    let start = Instant::now();
    let method = req.method().clone();
    let route = req.uri().path().to_owned();
    let resp = next.run(req).await;
    let rejected = resp.extensions().get::<Rejected>().map(|r| r.0);
    tracing::info!(
        %method,
        route,
        status = resp.status().as_u16(),
        latency_ms = start.elapsed().as_secs_f64() * 1e3,
        rejected,
        "request"
    );
    resp
}

async fn ask(State(st): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    st.admit(&headers)?;
    let req: AskRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid request: {e}")))?;
    let question = req.question.trim();
    if question.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "question is empty"));
    }
    if question.chars().count() > st.cfg.max_question_chars {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("question exceeds {} characters", st.cfg.max_question_chars),
        ));
    }
    if st.cfg.log_questions {
        tracing::debug!(question, "ask");
    }
    let session_id = req
        .session_id
        .filter(|s| !s.trim().is_empty())
        .unwrap_or_else(|| uuid::Uuid::new_v4().to_string());

    let verdict = st
        .guardrail
        .classify(question)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    if !verdict.relevant {
        let body = AskResponse {
            answer: st.guardrail.rejection_message().to_owned(),
            rejected: true,
            citations: Vec::new(),
            session_id,
            retrieved: Vec::new(),
        };
        return Ok(respond(body));
    }

    let index = st.index();
    if index.is_empty() {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "index not loaded"));
    }
    let families = st
        .guardrail
        .detect_topics(question)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?
        .len();
    let k = st.cfg.retrieval.k_for(families);

    // Held until the turn is recorded, so one session's requests run in order.
    let handle = st.sessions.get_or_create(&session_id, st.clock.now());
    let mut session = handle.lock().await;

    let query = st
        .embedder
        .embed(&[question.to_owned()])
        .await
        .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, format!("embedding failed: {e}")))?
        .remove(0);
    let results = match req.topic_filter.as_deref().filter(|t| !t.is_empty()) {
        Some(topic) => index.search_where(&query, k, |e| e.metadata.topic_domain == topic),
        None => index.search(&query, k),
    }
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    if results.is_empty() {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "no course material matches the topic filter",
        ));
    }
    let retrieved = results
        .iter()
        .map(|r| Retrieved {
            chunk_id: r.chunk_id.clone(),
            score: r.score,
        })
        .collect();
    let context: Vec<ContextChunk> = results
        .into_iter()
        .map(|r| ContextChunk {
            body: index.get(&r.chunk_id).map(|e| e.body.clone()).unwrap_or_default(),
            result: r,
        })
        .collect();

    let prompt = assemble_prompt(st.chat.config(), question, &context, &session)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let raw = st.chat.generate(&prompt).await.map_err(|e| {
        let status = match e {
            AnswerError::Config(_) | AnswerError::EmptyPrompt => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_GATEWAY,
        };
        ApiError::new(status, format!("generation failed: {e}"))
    })?;
    let answer = validate_citations(&raw, &prompt.included, &session_id);
    if answer.violations > 0 {
        tracing::warn!(violations = answer.violations, "model cited unknown sources");
    }
    session.push(question, answer.clone());
    drop(session);

    Ok(respond(AskResponse {
        citations: answer
            .citations
            .iter()
            .map(|c| CitationView {
                number: c.number,
                source_ref: c.source_ref.clone(),
                score: c.score,
            })
            .collect(),
        answer: answer.text,
        rejected: false,
        session_id,
        retrieved,
    }))
}

fn respond(body: AskResponse) -> Response {
    let rejected = body.rejected;
    let mut resp = Json(body).into_response();
    resp.extensions_mut().insert(Rejected(rejected));
    resp
}

async fn ingest(State(st): State<Arc<AppState>>, body: Bytes) -> Result<Json<IngestResponse>, ApiError> {
    let bad = |m: String| ApiError::new(StatusCode::BAD_REQUEST, m);
    let doc: Document = serde_json::from_slice(&body).map_err(|e| bad(format!("invalid document: {e}")))?;
    doc.validate().map_err(|e| bad(e.to_string()))?;
    let chunks = chunk_document(&doc, &st.cfg.chunk_policy).map_err(|e| bad(e.to_string()))?;
    let bodies: Vec<String> = chunks.iter().map(|c| c.body.clone()).collect();
    let vectors = st
        .embedder
        .embed(&bodies)
        .await
        .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, format!("embedding failed: {e}")))?;
    let entries: Vec<IndexEntry> = chunks
        .iter()
        .zip(vectors)
        .map(|(c, v)| IndexEntry::from_chunk(c, v))
        .collect();
    let added = entries.len();

    let _writer = st.ingest_lock.lock().await;
    let next = st
        .index()
        .with_entries(entries)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    if !st.cfg.index_path.as_os_str().is_empty() {
        persist(&st.cfg.index_path, &next.save())
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("saving index: {e}")))?;
    }
    *st.index.write().expect("index lock") = Arc::new(next);
    tracing::info!(doc_id = %doc.doc_id, chunks = added, "ingested");
    Ok(Json(IngestResponse { chunks_added: added }))
}

/// Write-then-rename so a crash never leaves a half-written index behind.
fn persist(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

async fn health(State(st): State<Arc<AppState>>) -> Json<Health> {
    let index = st.index();
    Json(Health {
        status: if index.is_empty() { "degraded" } else { "ok" }.into(),
        index_size: index.len(),
        model_id: index.model_id().to_owned(),
        uptime_s: st.started.elapsed().as_secs_f64(),
    })
}

/// Serves until Ctrl-C.
pub async fn run(cfg: ServiceConfig) -> Result<(), ServiceError> {
    let addr = cfg.bind_address.clone();
    let state = Arc::new(AppState::from_config(cfg)?);
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
