//! Prompt assembly, chat-completion calls and citation validation.

use std::collections::HashMap;
use std::path::Path;
use std::sync::LazyLock;
use std::time::Duration;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunker::count_tokens;
use crate::http::{post_json, ApiKey, RetryPolicy, UpstreamError};
use crate::index::RetrievalResult;

pub const DEFAULT_SYSTEM_PROMPT: &str = "\
You are a teaching assistant for an undergraduate Statics and Mechanics of Materials course.
Answer only from the numbered course material supplied with the question. When you use a \
piece of material, cite it with its bracketed number, for example [1]. Do not cite numbers \
that were not supplied.
Guide the student instead of solving the problem for them: name the governing principle, \
set up the relevant equations, explain each step and the reasoning behind it, and point out \
common mistakes. Do not simply state a final numeric answer; leave the last calculation for \
the student to carry out and check.
If the material does not cover the question, say so plainly.";

#[derive(Debug, Error)]
pub enum AnswerError {
    #[error("no retrieved context to answer from")]
    EmptyContext,
    #[error("context budget of {budget} tokens is below the smallest chunk ({smallest} tokens)")]
    BudgetTooSmall { budget: usize, smallest: usize },
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("model endpoint error: {0}")]
    Upstream(String),
    #[error("model returned an empty completion")]
    ModelRefusal,
    #[error("could not read generation config: {0}")]
    Io(#[from] std::io::Error),
}

impl From<UpstreamError> for AnswerError {
    fn from(e: UpstreamError) -> Self {
        match e {
            UpstreamError::Auth(m) => Self::Auth(m),
            e @ UpstreamError::Transport { .. } => Self::Transport(e.to_string()),
            e => Self::Upstream(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub endpoint_url: String,
    /// Name of the environment variable holding the key.
    pub api_key_env: String,
    pub model_id: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub presence_penalty: f64,
    pub frequency_penalty: f64,
    pub system_prompt_template: String,
    pub context_token_budget: usize,
    pub max_history: usize,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "https://api.openai.com/v1/chat/completions".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            model_id: "gpt-4o".into(),
            max_tokens: 400,
            temperature: 0.7,
            presence_penalty: 0.1,
            frequency_penalty: 0.1,
            system_prompt_template: DEFAULT_SYSTEM_PROMPT.into(),
            context_token_budget: 2500,
            max_history: 4,
            timeout_secs: 60,
            retry: RetryPolicy::default(),
        }
    }
}

impl GenerationConfig {
    pub fn from_toml(text: &str) -> Result<Self, AnswerError> {
        let cfg: Self = toml::from_str(text).map_err(|e| AnswerError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AnswerError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), AnswerError> {
        if self.context_token_budget == 0 {
            return Err(AnswerError::Config("context_token_budget must be > 0".into()));
        }
        if self.max_tokens == 0 {
            return Err(AnswerError::Config("max_tokens must be > 0".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(AnswerError::Config("temperature must be >= 0".into()));
        }
        if self.model_id.trim().is_empty() || self.endpoint_url.trim().is_empty() {
            return Err(AnswerError::Config("model_id and endpoint_url are required".into()));
        }
        Ok(())
    }
}

/// A retrieval hit together with the chunk text it points at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextChunk {
    pub result: RetrievalResult,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Citation {
    pub number: usize,
    pub chunk_id: String,
    pub source_ref: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub citations: Vec<Citation>,
    pub rejected: bool,
    pub session_id: String,
    /// Out-of-range citation markers removed from the model text.
    #[serde(default)]
    pub violations: usize,
}

impl Answer {
    pub fn rejection(message: &str, session_id: &str) -> Self {
        Self {
            text: message.to_owned(),
            citations: Vec::new(),
            rejected: true,
            session_id: session_id.to_owned(),
            violations: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub question: String,
    pub answer: Answer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub turns: Vec<Turn>,
    pub created_at: DateTime<Utc>,
    pub max_turns: usize,
}

impl Session {
    pub fn new(session_id: impl Into<String>, max_turns: usize) -> Self {
        Self {
            session_id: session_id.into(),
            turns: Vec::new(),
            created_at: Utc::now(),
            max_turns: max_turns.max(1),
        }
    }

    /// Appends a turn, dropping the oldest once `max_turns` is exceeded.
    pub fn push(&mut self, question: impl Into<String>, answer: Answer) {
        self.turns.push(Turn {
            question: question.into(),
            answer,
        });
        if self.turns.len() > self.max_turns {
            let excess = self.turns.len() - self.max_turns;
            self.turns.drain(..excess);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// An assembled prompt and the context chunks that made it in, numbered
/// `[1]..` in the order given.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub system: String,
    pub user: String,
    pub included: Vec<ContextChunk>,
}

impl Prompt {
    pub fn messages(&self) -> Vec<ChatMessage> {
        vec![
            ChatMessage {
                role: "system".into(),
                content: self.system.clone(),
            },
            ChatMessage {
                role: "user".into(),
                content: self.user.clone(),
            },
        ]
    }

    /// The whole prompt as one string.
    pub fn text(&self) -> String {
        format!("{}\n\n{}", self.system, self.user)
    }
}

fn context_entry(number: usize, chunk: &ContextChunk) -> String {
    format!("[{number}] {}:\n{}", chunk.result.source_ref, chunk.body.trim())
}

/// Builds the prompt. Chunks are taken in rank order and packed first-fit:
/// a chunk that would overflow `context_token_budget` is skipped whole and
/// later, smaller chunks may still go in.
pub fn assemble_prompt(
    cfg: &GenerationConfig,
    question: &str,
    results: &[ContextChunk],
    history: &Session,
) -> Result<Prompt, AnswerError> {
    if results.is_empty() {
        return Err(AnswerError::EmptyContext);
    }
    let mut ranked: Vec<&ContextChunk> = results.iter().collect();
    ranked.sort_by_key(|c| c.result.rank);

    let budget = cfg.context_token_budget;
    let mut used = 0;
    let mut included: Vec<ContextChunk> = Vec::new();
    let mut blocks: Vec<String> = Vec::new();
    for chunk in ranked {
        let entry = context_entry(included.len() + 1, chunk);
        let cost = count_tokens(&entry);
        if used + cost <= budget {
            used += cost;
            blocks.push(entry);
            included.push(chunk.clone());
        }
    }
    if included.is_empty() {
        let smallest = results
            .iter()
            .map(|c| count_tokens(&context_entry(1, c)))
            .min()
            .unwrap_or(0);
        return Err(AnswerError::BudgetTooSmall { budget, smallest });
    }

    let mut user = String::from("Course material:\n\n");
    user.push_str(&blocks.join("\n\n"));

    let recent: Vec<&Turn> = history.turns.iter().filter(|t| !t.answer.rejected).collect();
    let recent = &recent[recent.len().saturating_sub(cfg.max_history)..];
    if !recent.is_empty() {
        user.push_str("\n\nEarlier in this conversation:\n");
        for t in recent {
            user.push_str(&format!("\nStudent: {}\nAssistant: {}\n", t.question.trim(), t.answer.text.trim()));
        }
    }
    user.push_str(&format!("\n\nStudent question: {}", question.trim()));

    Ok(Prompt {
        system: cfg.system_prompt_template.clone(),
        user,
        included,
    })
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage>,
    max_tokens: u32,
    temperature: f64,
    presence_penalty: f64,
    frequency_penalty: f64,
}

#[derive(Deserialize)]
struct ChatResponse {
    #[serde(default)]
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    #[serde(default)]
    content: Option<String>,
}

/// Chat-completion client. The API key is read from the environment on
/// every call so rotated keys take effect without a restart.
#[derive(Debug, Clone)]
pub struct ChatClient {
    cfg: GenerationConfig,
    client: reqwest::Client,
}

impl ChatClient {
    pub fn new(cfg: GenerationConfig) -> Result<Self, AnswerError> {
        cfg.validate()?;
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs.max(1)))
            .build()
            .map_err(|e| AnswerError::Config(e.to_string()))?;
        Ok(Self { cfg, client })
    }

    pub fn config(&self) -> &GenerationConfig {
        &self.cfg
    }

    pub async fn generate(&self, prompt: &Prompt) -> Result<String, AnswerError> {
        if prompt.system.trim().is_empty() && prompt.user.trim().is_empty() {
            return Err(AnswerError::EmptyPrompt);
        }
        let key = ApiKey::from_env(&self.cfg.api_key_env)?;
        let req = ChatRequest {
            model: &self.cfg.model_id,
            messages: prompt.messages(),
            max_tokens: self.cfg.max_tokens,
            temperature: self.cfg.temperature,
            presence_penalty: self.cfg.presence_penalty,
            frequency_penalty: self.cfg.frequency_penalty,
        };
        let resp: ChatResponse =
            post_json(&self.client, &self.cfg.endpoint_url, &key, &req, &self.cfg.retry).await?;
        match resp.choices.into_iter().next().and_then(|c| c.message.content) {
            Some(text) if !text.trim().is_empty() => Ok(text),
            _ => Err(AnswerError::ModelRefusal),
        }
    }
}

/// One-shot generation; build a [`ChatClient`] to reuse connections.
pub async fn generate(cfg: &GenerationConfig, prompt: &Prompt) -> Result<String, AnswerError> {
    ChatClient::new(cfg.clone())?.generate(prompt).await
}

static MARKER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[([0-9]+)\]").unwrap());
static OPEN_TAIL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[[0-9]*$").unwrap());
static CLOSE_HEAD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[0-9]*\]").unwrap());

/// Turns raw model text into an [`Answer`] whose citation markers all point
/// at `context` (numbered `[1]..` in the order given).
///
/// Valid markers are renumbered in order of first use. Out-of-range markers
/// are removed and counted in `violations`. If no valid marker remains, a
/// "Sources:" line citing every context chunk is appended, so a non-empty
/// context always yields at least one citation.
pub fn validate_citations(text: &str, context: &[ContextChunk], session_id: &str) -> Answer {
    let mut renumber: HashMap<usize, usize> = HashMap::new();
    let mut citations: Vec<Citation> = Vec::new();
    let mut violations = 0;
    let mut out = String::with_capacity(text.len());
    let mut last = 0;

    for caps in MARKER.captures_iter(text) {
        let m = caps.get(0).expect("group 0");
        out.push_str(&text[last..m.start()]);
        last = m.end();
        let n = caps[1].parse::<usize>().ok().filter(|n| (1..=context.len()).contains(n));
        match n {
            Some(n) => {
                let next = renumber.len() + 1;
                let new = *renumber.entry(n).or_insert_with(|| {
                    let c = &context[n - 1];
                    citations.push(Citation {
                        number: next,
                        chunk_id: c.result.chunk_id.clone(),
                        source_ref: c.result.source_ref.clone(),
                        score: c.result.score,
                    });
                    next
                });
                out.push_str(&format!("[{new}]"));
            }
            None => {
                violations += 1;
                let rest = &text[last..];
                let glue = rest.chars().next().is_none_or(|c| c.is_whitespace() || c.is_ascii_punctuation());
                if glue {
                    while out.ends_with([' ', '\t']) {
                        out.pop();
                    }
                }
                // Dropping the marker must not fuse "[1" and "]" into a new one.
                if OPEN_TAIL.is_match(&out) && CLOSE_HEAD.is_match(rest) {
                    out.push(' ');
                }
            }
        }
    }
    out.push_str(&text[last..]);

    if violations > 0 {
        tracing::warn!(violations, "removed out-of-range citation markers");
    }

    if citations.is_empty() && !context.is_empty() {
        // Same fusion hazard at the seam with the appended line.
        if OPEN_TAIL.is_match(&out) {
            out.push(' ');
        }
        let listed: Vec<String> = context
            .iter()
            .enumerate()
            .map(|(i, c)| format!("[{}] {}", i + 1, c.result.source_ref))
            .collect();
        out.push_str(&format!("\n\nSources: {}", listed.join("; ")));
        citations = context
            .iter()
            .enumerate()
            .map(|(i, c)| Citation {
                number: i + 1,
                chunk_id: c.result.chunk_id.clone(),
                source_ref: c.result.source_ref.clone(),
                score: c.result.score,
            })
            .collect();
    }

    Answer {
        text: out,
        citations,
        rejected: false,
        session_id: session_id.to_owned(),
        violations,
    }
}

/// Numbers of all citation markers in `text`, in order of appearance.
pub fn citation_markers(text: &str) -> Vec<usize> {
    MARKER
        .captures_iter(text)
        .filter_map(|c| c[1].parse().ok())
        .collect()
}
