//! Chat-completions clients: a live HTTP client with retry, and a seeded
//! mock that answers from gold labels.

use std::collections::HashMap;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::prompt::parse_prompt;
use crate::corpus::{Label, NewsRecord};
use crate::util::hash_unit;

/// Environment variable holding the API credential.
pub const API_KEY_ENV: &str = "COALFAKE_LLM_KEY";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    BadResponse(String),
    #[error("no API key; set {API_KEY_ENV}")]
    MissingKey,
}

impl LlmError {
    fn retryable(&self) -> bool {
        match self {
            LlmError::Transport(_) => true,
            LlmError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Any chat-completions-compatible model. Implementations must be deterministic
/// for identical prompts when run at temperature 0.
pub trait ChatModel: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<Completion, LlmError>;
}

/// Request body: one user message at temperature 0.
pub fn chat_request_body(model: &str, prompt: &str) -> serde_json::Value {
    serde_json::json!({
        "model": model,
        "temperature": 0,
        "messages": [{"role": "user", "content": prompt}],
    })
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

/// Extracts the first choice's content and the usage block.
pub fn parse_chat_response(body: &[u8]) -> Result<Completion, LlmError> {
    let resp: ChatResponse =
        serde_json::from_slice(body).map_err(|e| LlmError::BadResponse(e.to_string()))?;
    let choice = resp
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| LlmError::BadResponse("no choices".into()))?;
    let usage = resp
        .usage
        .ok_or_else(|| LlmError::BadResponse("missing usage".into()))?;
    Ok(Completion {
        text: choice.message.content.unwrap_or_default(),
        prompt_tokens: usage.prompt_tokens,
        completion_tokens: usage.completion_tokens,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmEndpoint {
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
}

fn default_retries() -> u32 {
    2
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_timeout_s() -> u64 {
    60
}

pub struct OpenAiClient {
    endpoint: LlmEndpoint,
    api_key: String,
    http: reqwest::blocking::Client,
}

impl OpenAiClient {
    pub fn new(endpoint: LlmEndpoint, api_key: String) -> Result<Self, LlmError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(endpoint.timeout_s))
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(OpenAiClient {
            endpoint,
            api_key,
            http,
        })
    }

    pub fn from_env(endpoint: LlmEndpoint) -> Result<Self, LlmError> {
        let key = std::env::var(API_KEY_ENV).map_err(|_| LlmError::MissingKey)?;
        Self::new(endpoint, key)
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.endpoint.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, prompt: &str) -> Result<Completion, LlmError> {
        let resp = self
            .http
            .post(self.url())
            .bearer_auth(&self.api_key)
            .json(&chat_request_body(&self.endpoint.model, prompt))
            .send()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .bytes()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(LlmError::Status {
                status,
                body: String::from_utf8_lossy(&body).chars().take(500).collect(),
            });
        }
        parse_chat_response(&body)
    }
}

impl ChatModel for OpenAiClient {
    fn complete(&self, prompt: &str) -> Result<Completion, LlmError> {
        let mut delay = Duration::from_millis(self.endpoint.backoff_ms);
        let mut attempt = 0;
        loop {
            match self.attempt(prompt) {
                Err(e) if e.retryable() && attempt < self.endpoint.max_retries => {
                    tracing::warn!(attempt, error = %e, "LLM call failed; retrying");
                    thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Seeded stand-in for an LLM annotator. It answers with the gold label of
/// the target article, flipped when a per-article uniform draw exceeds the
/// configured accuracy. With `knn_accuracy` set, the higher accuracy applies
/// whenever a demonstration from the target's source appears in the prompt.
///
/// Token usage: `chars / 4` prompt tokens and 4 completion tokens per call.
pub struct MockLlm {
    truth: HashMap<String, (Label, String)>,
    accuracy: f64,
    knn_accuracy: Option<f64>,
    seed: u64,
}

impl MockLlm {
    pub fn new<'a>(
        records: impl IntoIterator<Item = &'a NewsRecord>,
        accuracy: f64,
        knn_accuracy: Option<f64>,
        seed: u64,
    ) -> Self {
        let truth = records
            .into_iter()
            .filter_map(|r| r.gold_label.map(|g| (r.text.clone(), (g, r.source.clone()))))
            .collect();
        MockLlm {
            truth,
            accuracy,
            knn_accuracy,
            seed,
        }
    }
}

impl ChatModel for MockLlm {
    fn complete(&self, prompt: &str) -> Result<Completion, LlmError> {
        let usage = |text: String| Completion {
            text,
            prompt_tokens: (prompt.chars().count() as u64 / 4).max(1),
            completion_tokens: 4,
        };
        let Some(parsed) = parse_prompt(prompt) else {
            return Ok(usage("I am unable to evaluate this request.".into()));
        };
        let Some((gold, source)) = self.truth.get(&parsed.target) else {
            return Ok(usage("I cannot determine whether this article is authentic.".into()));
        };
        let boosted = self.knn_accuracy.filter(|_| {
            parsed
                .examples
                .iter()
                .any(|d| self.truth.get(&d.text).is_some_and(|(_, s)| s == source))
        });
        let accuracy = boosted.unwrap_or(self.accuracy);
        let draw = hash_unit(&[
            &self.seed.to_le_bytes(),
            b"mock-llm",
            parsed.target.as_bytes(),
        ]);
        let answer = if draw < accuracy { *gold } else { gold.flipped() };
        Ok(usage(format!("This is {} news", answer.title())))
    }
}
