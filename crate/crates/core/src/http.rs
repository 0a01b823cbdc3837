//! JSON-over-HTTP plumbing shared by the embedding and chat clients.

use std::fmt;
use std::time::Duration;

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bearer credential. Never printed.
#[derive(Clone)]
pub struct ApiKey(String);

impl ApiKey {
    pub fn new(key: impl Into<String>) -> Self {
        Self(key.into())
    }

    /// Reads the key from the environment variable `var`.
    pub fn from_env(var: &str) -> Result<Self, UpstreamError> {
        match std::env::var(var) {
            Ok(k) if !k.trim().is_empty() => Ok(Self(k.trim().to_owned())),
            _ => Err(UpstreamError::Auth(format!(
                "environment variable {var} is unset or empty"
            ))),
        }
    }

    fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for ApiKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ApiKey(<redacted>)")
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum UpstreamError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("upstream returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("could not decode upstream response: {0}")]
    Decode(String),
}

/// Capped exponential backoff with jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    #[serde(with = "millis")]
    pub base_delay: Duration,
    #[serde(with = "millis")]
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(250),
            max_delay: Duration::from_secs(4),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based): half to full of the
    /// capped exponential step.
    pub fn delay(&self, retry: u32) -> Duration {
        let step = self
            .base_delay
            .saturating_mul(1u32.checked_shl(retry).unwrap_or(u32::MAX))
            .min(self.max_delay);
        step.mul_f64(rand::rng().random_range(0.5..=1.0))
    }
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

const ERROR_BODY_LIMIT: usize = 300;

fn truncate(mut s: String) -> String {
    if s.len() > ERROR_BODY_LIMIT {
        let mut cut = ERROR_BODY_LIMIT;
        while !s.is_char_boundary(cut) {
            cut -= 1;
        }
        s.truncate(cut);
        s.push('…');
    }
    s
}

/// POSTs `body` as JSON with bearer auth and decodes the JSON reply.
///
/// Connection failures, timeouts, 429 and 5xx are retried per `retry`;
/// 401/403 map to [`UpstreamError::Auth`] and other statuses fail at once.
pub async fn post_json<B, R>(
    client: &reqwest::Client,
    url: &str,
    key: &ApiKey,
    body: &B,
    retry: &RetryPolicy,
) -> Result<R, UpstreamError>
where
    B: Serialize + ?Sized,
    R: DeserializeOwned,
{
    let attempts = retry.attempts.max(1);
    let mut last = String::new();
    for attempt in 0..attempts {
        if attempt > 0 {
            tokio::time::sleep(retry.delay(attempt - 1)).await;
        }
        let resp = client
            .post(url)
            .bearer_auth(key.expose())
            .json(body)
            .send()
            .await;
        let resp = match resp {
            Ok(r) => r,
            Err(e) => {
                // reqwest errors carry the URL but never headers.
                last = e.without_url().to_string();
                tracing::debug!(attempt, error = %last, "upstream request failed");
                continue;
            }
        };
        let status = resp.status();
        if status.is_success() {
            let bytes = resp
                .bytes()
                .await
                .map_err(|e| UpstreamError::Decode(e.without_url().to_string()))?;
            return serde_json::from_slice(&bytes).map_err(|e| UpstreamError::Decode(e.to_string()));
        }
        let text = truncate(resp.text().await.unwrap_or_default());
        match status.as_u16() {
            401 | 403 => return Err(UpstreamError::Auth(format!("HTTP {}", status.as_u16()))),
            429 | 500..=599 => {
                last = format!("HTTP {}: {text}", status.as_u16());
                tracing::debug!(attempt, status = status.as_u16(), "retryable upstream status");
            }
            code => {
                return Err(UpstreamError::Status {
                    status: code,
                    body: text,
                })
            }
        }
    }
    Err(UpstreamError::Transport {
        attempts,
        message: last,
    })
}
