//! Text embeddings.
//!
//! Two backends sit behind [`Embedder`]: [`RemoteEmbedder`] speaks the common
//! `/embeddings` wire shape, [`LocalEmbedder`] hashes character trigrams into a
//! fixed number of buckets so tests and offline runs need no network.

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::http::{post_json, ApiKey, RetryPolicy, UpstreamError};

/// Default width of the remote embedding model.
pub const DEFAULT_REMOTE_DIM: usize = 3072;
pub const LOCAL_MODEL_ID: &str = "local-trigram-v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero vector")]
    ZeroVector,
    #[error("vector has a non-finite component")]
    NonFinite,
    #[error("nothing to embed: {0}")]
    EmptyInput(String),
    #[error("invalid embedder config: {0}")]
    Config(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("embedding endpoint error: {0}")]
    Upstream(String),
}

impl From<UpstreamError> for EmbedError {
    fn from(e: UpstreamError) -> Self {
        match e {
            UpstreamError::Auth(m) => Self::Auth(m),
            UpstreamError::Transport { .. } => Self::Transport(e.to_string()),
            other => Self::Upstream(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    model_id: String,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, model_id: impl Into<String>) -> Result<Self, EmbedError> {
        if values.is_empty() {
            return Err(EmbedError::EmptyInput("vector has no components".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        Ok(Self {
            values,
            model_id: model_id.into(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Scales to unit Euclidean norm.
    pub fn normalize(&mut self) -> Result<(), EmbedError> {
        let n = self.norm();
        if n == 0.0 {
            return Err(EmbedError::ZeroVector);
        }
        for v in &mut self.values {
            *v /= n;
        }
        Ok(())
    }

    pub fn normalized(mut self) -> Result<Self, EmbedError> {
        self.normalize()?;
        Ok(self)
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Cosine of the angle between two vectors, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backend {
    Remote,
    DeterministicLocal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub backend: Backend,
    #[serde(default)]
    pub endpoint_url: String,
    /// Name of the environment variable holding the key, not the key.
    #[serde(default)]
    pub api_key_env: String,
    pub model_id: String,
    pub dim: usize,
    #[serde(default = "yes")]
    pub normalize: bool,
    #[serde(default = "default_concurrency")]
    pub max_concurrent_requests: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn yes() -> bool {
    true
}
fn default_concurrency() -> usize {
    4
}
fn default_batch() -> usize {
    64
}
fn default_timeout() -> u64 {
    30
}

impl EmbedderConfig {
    pub fn local(dim: usize) -> Self {
        Self {
            backend: Backend::DeterministicLocal,
            endpoint_url: String::new(),
            api_key_env: String::new(),
            model_id: LOCAL_MODEL_ID.into(),
            dim,
            normalize: true,
            max_concurrent_requests: default_concurrency(),
            batch_size: default_batch(),
            timeout_secs: default_timeout(),
            retry: RetryPolicy::default(),
        }
    }

    pub fn remote(endpoint_url: &str, api_key_env: &str, model_id: &str) -> Self {
        Self {
            backend: Backend::Remote,
            endpoint_url: endpoint_url.into(),
            api_key_env: api_key_env.into(),
            model_id: model_id.into(),
            dim: DEFAULT_REMOTE_DIM,
            ..Self::local(DEFAULT_REMOTE_DIM)
        }
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dim == 0 {
            return Err(EmbedError::Config("dim must be positive".into()));
        }
        if self.model_id.trim().is_empty() {
            return Err(EmbedError::Config("model_id must be non-empty".into()));
        }
        if self.backend == Backend::Remote {
            if self.endpoint_url.trim().is_empty() {
                return Err(EmbedError::Config("remote backend needs endpoint_url".into()));
            }
            if self.api_key_env.trim().is_empty() {
                return Err(EmbedError::Config("remote backend needs api_key_env".into()));
            }
        }
        Ok(())
    }
}

#[async_trait]
pub trait Embedder: Send + Sync {
    fn model_id(&self) -> &str;
    fn dim(&self) -> usize;
    /// One vector per text, in input order.
    async fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError>;
}

pub fn build_embedder(cfg: &EmbedderConfig) -> Result<Arc<dyn Embedder>, EmbedError> {
    cfg.validate()?;
    Ok(match cfg.backend {
        Backend::DeterministicLocal => Arc::new(LocalEmbedder::from_config(cfg)),
        Backend::Remote => Arc::new(RemoteEmbedder::new(cfg.clone())?),
    })
}

/// Embeds `texts` with a backend built from `cfg`.
pub async fn embed_texts(
    cfg: &EmbedderConfig,
    texts: &[String],
) -> Result<Vec<EmbeddingVector>, EmbedError> {
    build_embedder(cfg)?.embed(texts).await
}

fn check_texts(texts: &[String]) -> Result<(), EmbedError> {
    if texts.is_empty() {
        return Err(EmbedError::EmptyInput("no texts".into()));
    }
    if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(EmbedError::EmptyInput(format!("text {i} is blank")));
    }
    Ok(())
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(seed, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// splitmix64 finalizer; FNV alone leaves the low bits poorly mixed.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Signed feature hashing of lowercased character trigrams.
///
/// The output is a pure function of `(text, model_id, dim)`; the hash is
/// FNV-1a seeded by the model id, so it is identical on every platform.
#[derive(Debug, Clone)]
pub struct LocalEmbedder {
    model_id: String,
    dim: usize,
    normalize: bool,
    seed: u64,
}

impl LocalEmbedder {
    pub fn new(model_id: &str, dim: usize, normalize: bool) -> Self {
        Self {
            model_id: model_id.to_owned(),
            dim: dim.max(1),
            normalize,
            seed: fnv1a(FNV_OFFSET, model_id.as_bytes()),
        }
    }

    pub fn from_config(cfg: &EmbedderConfig) -> Self {
        Self::new(&cfg.model_id, cfg.dim, cfg.normalize)
    }

    pub fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyInput("blank text".into()));
        }
        let padded: Vec<char> = std::iter::once(' ')
            .chain(
                text.split_whitespace()
                    .collect::<Vec<_>>()
                    .join(" ")
                    .to_lowercase()
                    .chars(),
            )
            .chain(std::iter::once(' '))
            .collect();
        let mut values = vec![0.0; self.dim];
        let mut buf = [0u8; 12];
        for gram in padded.windows(3) {
            let mut len = 0;
            for c in gram {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            let h = mix(fnv1a(self.seed, &buf[..len]));
            let bucket = (h % self.dim as u64) as usize;
            values[bucket] += if h >> 63 == 1 { -1.0 } else { 1.0 };
        }
        let v = EmbeddingVector::new(values, self.model_id.clone())?;
        if self.normalize {
            v.normalized()
        } else {
            Ok(v)
        }
    }
}

#[async_trait]
impl Embedder for LocalEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        check_texts(texts)?;
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
    dimensions: usize,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

/// Client for an embeddings endpoint that accepts
/// `{"model", "input", "dimensions"}` and answers `{"data": [{"embedding"}]}`.
pub struct RemoteEmbedder {
    cfg: EmbedderConfig,
    client: reqwest::Client,
    permits: Semaphore,
}

impl RemoteEmbedder {
    pub fn new(cfg: EmbedderConfig) -> Result<Self, EmbedError> {
        cfg.validate()?;
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs.max(1)))
            .build()
            .map_err(|e| EmbedError::Config(e.to_string()))?;
        let permits = Semaphore::new(cfg.max_concurrent_requests.max(1));
        Ok(Self {
            cfg,
            client,
            permits,
        })
    }

    async fn embed_batch(&self, batch: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let key = ApiKey::from_env(&self.cfg.api_key_env)?;
        let _permit = self.permits.acquire().await.expect("semaphore never closed");
        let req = EmbeddingRequest {
            model: &self.cfg.model_id,
            input: batch,
            dimensions: self.cfg.dim,
        };
        let mut resp: EmbeddingResponse =
            post_json(&self.client, &self.cfg.endpoint_url, &key, &req, &self.cfg.retry).await?;
        if resp.data.len() != batch.len() {
            return Err(EmbedError::Upstream(format!(
                "expected {} embeddings, got {}",
                batch.len(),
                resp.data.len()
            )));
        }
        if resp.data.iter().all(|d| d.index.is_some()) {
            resp.data.sort_by_key(|d| d.index);
        }
        resp.data
            .into_iter()
            .map(|d| {
                if d.embedding.len() != self.cfg.dim {
                    return Err(EmbedError::DimensionMismatch {
                        expected: self.cfg.dim,
                        got: d.embedding.len(),
                    });
                }
                let v = EmbeddingVector::new(d.embedding, self.cfg.model_id.clone())?;
                if self.cfg.normalize {
                    v.normalized()
                } else {
                    Ok(v)
                }
            })
            .collect()
    }
}

#[async_trait]
impl Embedder for RemoteEmbedder {
    fn model_id(&self) -> &str {
        &self.cfg.model_id
    }

    fn dim(&self) -> usize {
        self.cfg.dim
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        check_texts(texts)?;
        let batches = texts
            .chunks(self.cfg.batch_size.max(1))
            .map(|b| self.embed_batch(b));
        let results = futures::future::join_all(batches).await;
        let mut out = Vec::with_capacity(texts.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }
}
