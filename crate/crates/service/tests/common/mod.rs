//! Local stand-ins for the embedding and chat endpoints, with call counters,
//! and a helper that runs the service against them.
#![allow(dead_code)]

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, Once};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};
use tutor_core::answer::GenerationConfig;
use tutor_core::embed::{EmbedderConfig, LocalEmbedder};
use tutor_core::guardrail::GuardrailConfig;
use tutor_core::http::RetryPolicy;
use tutor_core::index::{AnnParams, VectorIndex};
use tutor_service::limiter::Clock;
use tutor_service::{router, AppState, RateLimit, ServiceConfig};

pub const KEY_VAR: &str = "TUTOR_SERVICE_TEST_KEY";
pub const SECRET: &str = "sk-service-test";
pub const DIM: usize = 128;
pub const EMBED_MODEL: &str = "stub-embed";
static SET_KEY: Once = Once::new();

pub fn init_key() {
    SET_KEY.call_once(|| std::env::set_var(KEY_VAR, SECRET));
}

#[derive(Clone, Default)]
pub struct Upstream {
    pub embed_calls: Arc<AtomicUsize>,
    pub chat_calls: Arc<AtomicUsize>,
    pub chat_bodies: Arc<Mutex<Vec<Value>>>,
    pub embed_down: Arc<AtomicBool>,
    pub reply: Arc<Mutex<String>>,
}

impl Upstream {
    pub fn calls(&self) -> usize {
        self.embed_calls.load(Ordering::SeqCst) + self.chat_calls.load(Ordering::SeqCst)
    }

    pub fn chat_calls(&self) -> usize {
        self.chat_calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.embed_calls.store(0, Ordering::SeqCst);
        self.chat_calls.store(0, Ordering::SeqCst);
        self.chat_bodies.lock().unwrap().clear();
    }
}

async fn embeddings(State(u): State<Upstream>, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    u.embed_calls.fetch_add(1, Ordering::SeqCst);
    if u.embed_down.load(Ordering::SeqCst) {
        return (StatusCode::SERVICE_UNAVAILABLE, Json(json!({})));
    }
    let local = LocalEmbedder::new(EMBED_MODEL, DIM, true);
    let data: Vec<Value> = body["input"]
        .as_array()
        .unwrap()
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let v = local.embed_one(t.as_str().unwrap()).unwrap();
            json!({"index": i, "embedding": v.values()})
        })
        .collect();
    (StatusCode::OK, Json(json!({"data": data})))
}

async fn chat(State(u): State<Upstream>, Json(body): Json<Value>) -> Json<Value> {
    u.chat_calls.fetch_add(1, Ordering::SeqCst);
    u.chat_bodies.lock().unwrap().push(body);
    let content = u.reply.lock().unwrap().clone();
    Json(json!({"choices": [{"message": {"role": "assistant", "content": content}}]}))
}

pub async fn start_upstream() -> (String, Upstream) {
    let u = Upstream::default();
    *u.reply.lock().unwrap() = "Begin with the torsion formula [1] and check units [2].".into();
    let app = Router::new()
        .route("/v1/embeddings", post(embeddings))
        .route("/v1/chat/completions", post(chat))
        .with_state(u.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}/v1"), u)
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        attempts: 2,
        base_delay: Duration::from_millis(1),
        max_delay: Duration::from_millis(2),
    }
}

pub fn service_config(upstream: &str, rate: RateLimit) -> ServiceConfig {
    init_key();
    ServiceConfig {
        bind_address: "127.0.0.1:0".into(),
        rate_limit: rate,
        embedder: EmbedderConfig {
            dim: DIM,
            retry: fast_retry(),
            ..EmbedderConfig::remote(&format!("{upstream}/embeddings"), KEY_VAR, EMBED_MODEL)
        },
        ..ServiceConfig::default()
    }
}

pub fn generation_config(upstream: &str) -> GenerationConfig {
    init_key();
    GenerationConfig {
        endpoint_url: format!("{upstream}/chat/completions"),
        api_key_env: KEY_VAR.into(),
        model_id: "stub-chat".into(),
        retry: fast_retry(),
        ..GenerationConfig::default()
    }
}

pub fn generous() -> RateLimit {
    RateLimit {
        requests_per_minute: 100_000,
        burst: 10_000,
    }
}

pub struct Running {
    pub base: String,
    pub state: Arc<AppState>,
    pub http: reqwest::Client,
}

impl Running {
    pub async fn post(&self, path: &str, body: &Value) -> (u16, reqwest::header::HeaderMap, Value) {
        let r = self
            .http
            .post(format!("{}{path}", self.base))
            .json(body)
            .send()
            .await
            .unwrap();
        let status = r.status().as_u16();
        let headers = r.headers().clone();
        (status, headers, r.json().await.unwrap_or(Value::Null))
    }

    pub async fn post_raw(&self, path: &str, body: &str) -> (u16, Value) {
        let r = self
            .http
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .body(body.to_owned())
            .send()
            .await
            .unwrap();
        (r.status().as_u16(), r.json().await.unwrap_or(Value::Null))
    }

    pub async fn ask(&self, question: &str) -> (u16, Value) {
        let (s, _, v) = self.post("/ask", &json!({"question": question})).await;
        (s, v)
    }

    pub async fn health(&self) -> Value {
        self.http
            .get(format!("{}/health", self.base))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap()
    }
}

pub async fn start_service(cfg: ServiceConfig, gen: GenerationConfig, clock: Option<Arc<dyn Clock>>) -> Running {
    let index = VectorIndex::empty(cfg.embedder.dim, &cfg.embedder.model_id, AnnParams::default());
    let mut state = AppState::new(cfg, GuardrailConfig::default(), gen, index).unwrap();
    if let Some(c) = clock {
        state = state.with_clock(c);
    }
    let state = Arc::new(state);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(state.clone());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    Running {
        base: format!("http://{addr}"),
        state,
        http: reqwest::Client::new(),
    }
}

/// Torsion fixture documents as `/ingest` bodies.
pub fn torsion_bodies() -> Vec<Value> {
    tutor_core::eval::torsion_documents()
        .iter()
        .map(|d| serde_json::to_value(d).unwrap())
        .collect()
}
