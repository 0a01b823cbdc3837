use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tutor_core::chunker::ChunkPolicy;
use tutor_core::embed::EmbedderConfig;
use tutor_core::index::{AnnParams, RetrievalDepth};

use crate::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateLimit {
    pub requests_per_minute: u32,
    pub burst: u32,
}

impl Default for RateLimit {
    fn default() -> Self {
        Self {
            requests_per_minute: 30,
            burst: 5,
        }
    }
}

/// `service.toml`. Relative paths resolve against the config file's directory.
///
/// ```toml
/// bind_address = "127.0.0.1:8080"
/// index_path = "course.idx"
/// guardrail_config_path = ""     # empty: shipped vocabulary
/// generation_config_path = ""    # empty: built-in decoding defaults
/// max_question_chars = 2000
///
/// [rate_limit]
/// requests_per_minute = 30
/// burst = 5
///
/// [embedder]
/// backend = "Remote"
/// endpoint_url = "https://api.openai.com/v1/embeddings"
/// api_key_env = "OPENAI_API_KEY"
/// model_id = "text-embedding-3-large"
/// dim = 3072
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind_address: String,
    /// Where the index is loaded from and where `/ingest` writes it back.
    /// Empty keeps the index in memory only.
    pub index_path: PathBuf,
    pub guardrail_config_path: PathBuf,
    pub generation_config_path: PathBuf,
    pub rate_limit: RateLimit,
    pub max_question_chars: usize,
    /// Header that identifies a client for rate limiting.
    pub client_key_header: String,
    pub session_ttl_secs: u64,
    pub session_max_turns: usize,
    /// Log question text at debug level.
    pub log_questions: bool,
    pub embedder: EmbedderConfig,
    pub ann: AnnParams,
    pub retrieval: RetrievalDepth,
    pub chunk_policy: ChunkPolicy,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind_address: "127.0.0.1:8080".into(),
            index_path: PathBuf::new(),
            guardrail_config_path: PathBuf::new(),
            generation_config_path: PathBuf::new(),
            rate_limit: RateLimit::default(),
            max_question_chars: 2000,
            client_key_header: "x-client-key".into(),
            session_ttl_secs: 2 * 60 * 60,
            session_max_turns: 50,
            log_questions: false,
            embedder: EmbedderConfig::remote(
                "https://api.openai.com/v1/embeddings",
                "OPENAI_API_KEY",
                "text-embedding-3-large",
            ),
            ann: AnnParams::default(),
            retrieval: RetrievalDepth::default(),
            chunk_policy: ChunkPolicy::default(),
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            for p in [
                &mut cfg.index_path,
                &mut cfg.guardrail_config_path,
                &mut cfg.generation_config_path,
            ] {
                if !p.as_os_str().is_empty() && p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        self.bind_address
            .parse::<SocketAddr>()
            .map_err(|e| ServiceError::Config(format!("bind_address: {e}")))?;
        if self.rate_limit.requests_per_minute == 0 || self.rate_limit.burst == 0 {
            return Err(ServiceError::Config("rate_limit values must be positive".into()));
        }
        if self.max_question_chars == 0 {
            return Err(ServiceError::Config("max_question_chars must be positive".into()));
        }
        if self.client_key_header.trim().is_empty() {
            return Err(ServiceError::Config("client_key_header must be non-empty".into()));
        }
        if self.session_ttl_secs == 0 {
            return Err(ServiceError::Config("session_ttl_secs must be positive".into()));
        }
        self.embedder
            .validate()
            .map_err(|e| ServiceError::Config(e.to_string()))?;
        self.chunk_policy
            .validate()
            .map_err(|e| ServiceError::Config(e.to_string()))?;
        Ok(())
    }
}
